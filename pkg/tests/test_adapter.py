"""Unit tests for token selection, prompt fusion and the side network."""

import unittest

import numpy as np

from src.fpt_plus.adapter import (
    FptConfig, FptModel, OutProjector, SelectedFeatures, SideNetwork, SideTrace,
    extract_features, fuse, gather_features, importance_scores, prompt_attention_profile,
    select_important, select_random, selection_count, side_forward, side_layer_map, stack_features,
)
from src.fpt_plus.errors import ConfigError, ContractError, DimensionError
from src.fpt_plus.tensor import Tensor, backward, graph_scope, no_grad
from src.fpt_plus.train import AdamW, TrainConfig, cross_entropy
from src.fpt_plus.vit import TokenSequence, VisionTransformer, lpm_forward
from tests.gradcheck import gradcheck
from tests.toy import toy_config, toy_vit


def _images(cfg, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    lead = () if batch is None else (batch,)
    high = rng.uniform(-1, 1, size=lead + (cfg.lpm.image_size, cfg.lpm.image_size, 3)).astype(np.float32)
    low = rng.uniform(-1, 1, size=lead + (cfg.low_res, cfg.low_res, 3)).astype(np.float32)
    return high, low


def _brute_importance(attn, has_cls):
    heads, n, _ = attn.shape
    scores = []
    for j in range(1 if has_cls else 0, n):
        total = sum(attn[h, i, j] for h in range(heads) for i in range(n) if i != j)
        scores.append(total / (heads * (n - 1)))
    return np.array(scores)


class TestLayerMap(unittest.TestCase):
    """Pairing side layers with backbone layers."""

    def test_examples(self):
        self.assertEqual([side_layer_map(12, 6, l) for l in range(1, 7)], [7, 8, 9, 10, 11, 12])
        self.assertEqual(side_layer_map(12, 12, 1), 1)
        self.assertEqual(side_layer_map(12, 1, 1), 12)

    def test_invalid(self):
        with self.assertRaises(ContractError):
            side_layer_map(12, 13, 1)
        with self.assertRaises(ContractError):
            side_layer_map(12, 6, 0)

    def test_fused_layers_property(self):
        self.assertEqual(FptConfig().fused_layers, [7, 8, 9, 10, 11, 12])


class TestImportance(unittest.TestCase):
    """Importance scores and top-k selection."""

    def test_uniform_attention(self):
        attn = np.full((2, 5, 5), 0.2)
        np.testing.assert_allclose(importance_scores(attn, False), np.full(5, 0.2))

    def test_two_tokens(self):
        attn = np.array([[[0.0, 1.0], [1.0, 0.0]]])
        np.testing.assert_allclose(importance_scores(attn, False), [1.0, 1.0])

    def test_class_column_dropped_but_row_votes(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            raw = rng.random((3, 6, 6))
            attn = raw / raw.sum(axis=-1, keepdims=True)
            np.testing.assert_allclose(importance_scores(attn, True), _brute_importance(attn, True))
            np.testing.assert_allclose(importance_scores(attn, False), _brute_importance(attn, False))

    def test_too_few_tokens(self):
        with self.assertRaises(ContractError):
            importance_scores(np.ones((1, 1, 1)), False)

    def test_selection_count(self):
        self.assertEqual(selection_count(1024, 0.2), 204)
        self.assertEqual(selection_count(10, 0.01), 1)
        self.assertEqual(selection_count(10, 1.0), 10)
        self.assertEqual(selection_count(10, 0.3), 3)
        with self.assertRaises(ContractError):
            selection_count(0, 0.5)

    def test_select_important_examples(self):
        np.testing.assert_array_equal(select_important(np.array([0.1, 0.5, 0.3, 0.9]), 0.5), [1, 3])
        np.testing.assert_array_equal(select_important(np.array([0.5, 0.5, 0.5]), 0.67), [0, 1])
        np.testing.assert_array_equal(select_important(np.array([0.2, 0.1]), 1.0), [0, 1])
        with self.assertRaises(ContractError):
            select_important(np.array([]), 0.5)

    def test_select_important_oracle(self):
        """Matches a sort-based oracle and ignores constant shifts."""
        rng = np.random.default_rng(1)
        for _ in range(50):
            scores = rng.integers(0, 6, size=30).astype(np.float64)
            ratio = rng.uniform(0.05, 1.0)
            count = selection_count(30, ratio)
            ranked = sorted(range(30), key=lambda i: (-scores[i], i))[:count]
            expected = np.array(sorted(ranked))
            np.testing.assert_array_equal(select_important(scores, ratio), expected)
            np.testing.assert_array_equal(select_important(scores + 7.0, ratio), expected)


class TestRandomSelection(unittest.TestCase):
    """Seeded uniform selection."""

    def test_full_ratio_selects_everything(self):
        np.testing.assert_array_equal(select_random(7, 1.0, 3), np.arange(7))

    def test_deterministic_and_sorted(self):
        a = select_random(100, 0.2, [1, 2, 3])
        b = select_random(100, 0.2, [1, 2, 3])
        np.testing.assert_array_equal(a, b)
        self.assertEqual(len(a), 20)
        self.assertTrue((np.diff(a) > 0).all())

    def test_inclusion_frequency(self):
        """Each token is picked with probability n_sel/N over 10,000 draws."""
        counts = np.zeros(20)
        for seed in range(10_000):
            counts[select_random(20, 0.25, seed)] += 1
        # n_sel = 5, p = 0.25, sigma = sqrt(10000 * 0.25 * 0.75) ~ 43
        self.assertTrue((np.abs(counts - 2500) < 5 * 43.3).all())


class TestFuse(unittest.TestCase):
    """Cross-attention of prompts over the selected tokens."""

    def _identity_projector(self, d):
        return OutProjector(Tensor(np.eye(d)), Tensor(np.zeros(d)))

    def test_single_selected_token_copies_its_value(self):
        rng = np.random.default_rng(0)
        z = TokenSequence(Tensor(np.zeros((3, 4))), True)
        prompts = Tensor(rng.normal(size=(2, 4)))
        keys = Tensor(rng.normal(size=(2, 1, 2)))
        values = Tensor(rng.normal(size=(2, 1, 2)))
        sel = SelectedFeatures(12, np.array([5]), keys, values)

        out, weights = fuse(z, prompts, sel, self._identity_projector(4), return_attention=True)

        self.assertEqual(out.length, 5)
        np.testing.assert_allclose(weights.data, np.ones((2, 2, 1)))
        expected = values.data.transpose(1, 0, 2).reshape(1, 4) + prompts.data
        np.testing.assert_allclose(out.tokens.data[3:], expected, rtol=1e-6)
        np.testing.assert_array_equal(out.tokens.data[:3], np.zeros((3, 4)))

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        heads, d, n_p, n_sel = 2, 4, 2, 3
        prompts = rng.normal(size=(n_p, d)).astype(np.float32)
        keys = rng.normal(size=(heads, n_sel, d // heads)).astype(np.float32)
        values = rng.normal(size=(heads, n_sel, d // heads)).astype(np.float32)
        w_out = rng.normal(size=(d, 3)).astype(np.float32)
        b_out = rng.normal(size=3).astype(np.float32)

        normed = (prompts - prompts.mean(-1, keepdims=True)) / np.sqrt(prompts.var(-1, keepdims=True) + 1e-5)
        per_head = []
        for h in range(heads):
            q = normed[:, h * 2:(h + 1) * 2]
            scores = q @ keys[h].T / np.sqrt(2)
            e = np.exp(scores - scores.max(-1, keepdims=True))
            per_head.append((e / e.sum(-1, keepdims=True)) @ values[h])
        expected = (np.concatenate(per_head, axis=-1) + prompts) @ w_out + b_out

        z = TokenSequence(Tensor(np.zeros((4, 3))), True)
        sel = SelectedFeatures(1, np.arange(n_sel), Tensor(keys), Tensor(values))
        out = fuse(z, Tensor(prompts), sel, OutProjector(Tensor(w_out), Tensor(b_out)))
        np.testing.assert_allclose(out.tokens.data[4:], expected, rtol=1e-4, atol=1e-5)

    def test_lengths(self):
        """64 side tokens plus 16 prompts give 80 tokens."""
        z = TokenSequence(Tensor(np.zeros((64, 4))), False)
        sel = SelectedFeatures(1, np.arange(3), Tensor(np.zeros((2, 3, 2))), Tensor(np.zeros((2, 3, 2))))
        out = fuse(z, Tensor(np.ones((16, 4))), sel, self._identity_projector(4))
        self.assertEqual(out.tokens.shape, (80, 4))

    def test_batch_broadcast(self):
        z = TokenSequence(Tensor(np.zeros((3, 5, 4))), True)
        sel = SelectedFeatures(1, np.zeros((3, 2), dtype=np.int64),
                               Tensor(np.ones((3, 2, 2, 2))), Tensor(np.ones((3, 2, 2, 2))))
        out = fuse(z, Tensor(np.ones((2, 4))), sel, self._identity_projector(4))
        self.assertEqual(out.tokens.shape, (3, 7, 4))

    def test_head_mismatch(self):
        z = TokenSequence(Tensor(np.zeros((3, 4))), True)
        sel = SelectedFeatures(1, np.arange(2), Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((3, 2, 2))))
        with self.assertRaises(DimensionError):
            fuse(z, Tensor(np.ones((2, 4))), sel, self._identity_projector(4))


class TestConfig(unittest.TestCase):
    """Architecture validation and derived sizes."""

    def test_defaults(self):
        cfg = FptConfig()
        self.assertEqual(cfg.d_side, 96)
        self.assertEqual(cfg.heads_side, 12)
        self.assertEqual(cfg.num_selected, 204)
        self.assertEqual(cfg.side_vit.num_tokens, 65)

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            FptConfig(side_layers=13)
        with self.assertRaises(ConfigError):
            FptConfig(reduction=7)
        with self.assertRaises(ConfigError):
            FptConfig(token_ratio=0.0)
        with self.assertRaises(ConfigError):
            FptConfig(low_res=100)
        with self.assertRaises(ConfigError):
            FptConfig(selection="greedy")
        with self.assertRaises(ConfigError):
            FptConfig(num_classes=1)

    def test_default_learnable_count(self):
        """908,354 learnable parameters, about 1.05% of the backbone."""
        shapes = SideNetwork.parameter_shapes(FptConfig())
        learnable = sum(int(np.prod(s)) for s in shapes.values())
        self.assertEqual(learnable, 908_354)
        self.assertAlmostEqual(learnable / 86_433_024 * 100, 1.05, delta=0.02)

    def test_doubling_prompts(self):
        base = sum(int(np.prod(s)) for s in SideNetwork.parameter_shapes(FptConfig()).values())
        doubled = sum(int(np.prod(s)) for s in SideNetwork.parameter_shapes(FptConfig(prompts=32)).values())
        self.assertEqual(doubled - base, 73_728)


class TestSideNetwork(unittest.TestCase):
    """Side network forward, gradients and fusion wiring."""

    @classmethod
    def setUpClass(cls):
        cls.cfg = toy_config()
        cls.lpm = VisionTransformer.initialize(cls.cfg.lpm, "lpm/", seed=0).freeze()

    def setUp(self):
        self.side = SideNetwork.initialize(self.cfg, seed=1)
        self.high, self.low = _images(self.cfg)
        self.features = extract_features(self.high, self.lpm, self.cfg, "img")

    def test_feature_records(self):
        self.assertEqual([f.layer_index for f in self.features], [3, 4])
        for f in self.features:
            self.assertEqual(f.keys.shape, (2, 4, 8))
            self.assertEqual(f.indices.shape, (4,))

    def test_token_lengths(self):
        """Prompt slots exist only inside each block."""
        trace = SideTrace()
        with no_grad():
            logits = self.side(self.low, self.features, trace=trace)
        self.assertEqual(logits.shape, (2,))
        self.assertEqual(trace.in_block_lengths, [8, 8])
        self.assertEqual(trace.between_lengths, [5, 5])

    def test_default_token_lengths(self):
        """65 side tokens between blocks and 81 inside them at the default geometry."""
        cfg = FptConfig()
        side = SideNetwork.initialize(cfg)
        features = [SelectedFeatures(layer, np.arange(204), Tensor(np.zeros((12, 204, 64))),
                                     Tensor(np.zeros((12, 204, 64)))) for layer in cfg.fused_layers]
        trace = SideTrace()
        with no_grad():
            side(np.zeros((128, 128, 3), dtype=np.float32), features, trace=trace)
        self.assertEqual(trace.between_lengths, [65] * 6)
        self.assertEqual(trace.in_block_lengths, [81] * 6)

    def test_batched_matches_single(self):
        high, low = _images(self.cfg, seed=2, batch=2)
        records = [extract_features(high[i], self.lpm, self.cfg, f"i{i}") for i in range(2)]
        with no_grad():
            batched = self.side(low, stack_features(records)).data
            singles = [self.side(low[i], records[i]).data for i in range(2)]
        np.testing.assert_allclose(batched, np.stack(singles), rtol=1e-5, atol=1e-6)

    def test_feature_contract(self):
        with self.assertRaises(ContractError):
            self.side(self.low, self.features[:1])
        shuffled = [self.features[1], self.features[0]]
        with self.assertRaises(ContractError):
            self.side(self.low, shuffled)

    def test_full_pipeline_gradcheck(self):
        """Side, prompt, norm, projector and head gradients match central differences over 20 seeds."""
        cfg = toy_config(lpm=toy_vit(image_size=32), token_ratio=0.5)
        lpm = VisionTransformer.initialize(cfg.lpm, "lpm/", seed=0).freeze()
        rates = []
        for seed in range(20):
            side = SideNetwork.initialize(cfg, seed=seed)
            high, low = _images(cfg, seed=seed)
            features = extract_features(high, lpm, cfg)
            rates.append(gradcheck(lambda: side(low, features), list(side.params.values()),
                                   rtol=2e-2, seed=seed, max_elements=12))
        self.assertGreaterEqual(float(np.mean(rates)), 0.98)

    def test_backbone_depth_does_not_change_the_graph(self):
        """The recorded graph depends on the side network only."""
        counts = []
        for layers in (4, 8):
            cfg = toy_config(lpm=toy_vit(image_size=64, layers=layers))
            lpm = VisionTransformer.initialize(cfg.lpm, "lpm/", seed=0).freeze()
            side = SideNetwork.initialize(cfg, seed=1)
            features = extract_features(self.high, lpm, cfg)
            with graph_scope() as graph:
                side(self.low, features)
                counts.append(len(graph))
        self.assertEqual(counts[0], counts[1])

    def test_backbone_stays_frozen(self):
        model = FptModel(self.cfg, self.lpm, self.side)
        before = {n: t.data.copy() for n, t in self.lpm.params.items()}
        with graph_scope():
            loss = cross_entropy(model.logits(self.low[None], stack_features([model.features(self.high)])), [1])
            backward(loss)
        for name, tensor in self.lpm.params.items():
            self.assertIsNone(tensor.grad)
            np.testing.assert_array_equal(tensor.data, before[name])

    def test_unselected_tokens_are_ignored(self):
        """Changing the K/V of tokens that were not selected leaves the logits untouched."""
        taps = lpm_forward(self.high, self.lpm, self.cfg.fused_layers)
        features, altered = [], []
        for tap, original in zip(taps, self.features):
            features.append(gather_features(tap, original.indices, True))
            mask = np.ones(tap.values.shape[-2], dtype=bool)
            mask[original.indices + 1] = False
            tap.values.data[:, mask, :] = 99.0
            tap.keys.data[:, mask, :] = -99.0
            altered.append(gather_features(tap, original.indices, True))
        with no_grad():
            a = self.side(self.low, features).data
            b = self.side(self.low, altered).data
        np.testing.assert_array_equal(a, b)

    def test_projector_is_shared(self):
        """Every layer's prompt slots pass through one projector tensor."""
        projector = self.side.out_projector
        self.assertIs(projector.weight, self.side.params["side/f_out.weight"])
        with no_grad():
            z = self.side.backbone.embed(self.low)
            before = [fuse(z, self.side.prompt_set[i], self.features[i], projector).tokens.data.copy()
                      for i in range(self.cfg.side_layers)]
            projector.weight.data += 0.5
            after = [fuse(z, self.side.prompt_set[i], self.features[i], self.side.out_projector).tokens.data
                     for i in range(self.cfg.side_layers)]
        for b, a in zip(before, after):
            self.assertFalse(np.array_equal(b[5:], a[5:]))

    def test_every_group_receives_gradient(self):
        """After one optimizer step all parameter groups get non-zero gradients."""
        optimizer = AdamW(self.side.params, TrainConfig(lr_max=1e-2))
        labels = [1]
        batch = stack_features([self.features])
        for step in range(2):
            optimizer.zero_grad()
            with graph_scope():
                backward(cross_entropy(self.side(self.low[None], batch), labels))
            if step == 0:
                optimizer.step(1e-2)
        for group, names in self.side.param_groups().items():
            self.assertTrue(names, group)
            self.assertTrue(any(np.any(self.side.params[n].grad) for n in names), group)

    def test_random_selection_keyed_by_image(self):
        cfg = toy_config(selection="random", selection_seed=5)
        first = extract_features(self.high, self.lpm, cfg, "a")
        again = extract_features(self.high, self.lpm, cfg, "a")
        other = extract_features(self.high, self.lpm, cfg, "b")
        for x, y in zip(first, again):
            np.testing.assert_array_equal(x.indices, y.indices)
        self.assertFalse(all(np.array_equal(x.indices, y.indices) for x, y in zip(first, other)))

    def test_prompt_attention_profile(self):
        profile = prompt_attention_profile(self.side, self.low, self.features)
        self.assertEqual(len(profile), 2)
        self.assertTrue(all(0.0 <= p <= 1.0 for p in profile))

    def test_fusion_disabled(self):
        cfg = toy_config(fusion=False)
        side = SideNetwork.initialize(cfg)
        self.assertEqual(extract_features(self.high, self.lpm, cfg), [])
        self.assertEqual(side.param_groups()["prompts"], [])
        with no_grad():
            self.assertEqual(side_forward(self.low, [], side).shape, (2,))

    def test_model_rejects_foreign_backbone(self):
        other = VisionTransformer.initialize(toy_vit(image_size=32), "lpm/")
        with self.assertRaises(ConfigError):
            FptModel(self.cfg, other, self.side)


if __name__ == '__main__':
    unittest.main()
