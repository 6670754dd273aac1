"""Unit tests for efficiency metrics, parameter census, memory peaks and raster export."""

import os
import shutil
import tempfile
import unittest

import numpy as np

from src.fpt_plus.adapter import FptConfig, FptModel, SelectedFeatures
from src.fpt_plus.errors import ContractError
from src.fpt_plus.profiler import (
    component_ablation, config_census, efficiency_report, export_selection_map,
    measure_fpt_peak, measure_full_finetune_peak, measure_inference_peak, measure_linear_probe_peak,
    param_census, pme, ppe, selection_map_arrays, write_prompt_profile,
)
from src.fpt_plus.tensor import Tensor
from src.fpt_plus.vit import ViTConfig
from tests.gradcheck import RUN_SLOW
from tests.toy import toy_config, toy_vit


def _wide_config(**overrides):
    """Backbone wide enough that its gradients dominate a full fine-tuning step."""
    return toy_config(lpm=toy_vit(image_size=64, layers=4, dim=64, heads=4), reduction=8, **overrides)


class TestEfficiencyScores(unittest.TestCase):
    """PPE and PME."""

    def test_reference_values(self):
        self.assertAlmostEqual(ppe(88.82, 1.0), 65.73, delta=0.01)
        self.assertAlmostEqual(ppe(87.12, 0.0103), 86.73, delta=0.01)
        self.assertAlmostEqual(pme(87.12, 736 / 23128), 85.94, delta=0.01)
        self.assertAlmostEqual(ppe(83.28, 0.0001), 83.28, delta=0.01)
        self.assertAlmostEqual(pme(83.28, 3416 / 23128), 78.44, delta=0.01)

    def test_zero_ratio_is_identity(self):
        self.assertEqual(ppe(70.0, 0.0), 70.0)
        self.assertEqual(pme(70.0, 0.0), 70.0)

    def test_negative_inputs(self):
        with self.assertRaises(ContractError):
            ppe(-1.0, 0.5)
        with self.assertRaises(ContractError):
            pme(50.0, -0.1)


class TestCensus(unittest.TestCase):
    """Parameter counting."""

    def test_default_ratio(self):
        census = config_census(FptConfig())
        self.assertEqual(census.learnable, 908_354)
        self.assertEqual(census.groups["lpm"], 86_433_024)
        self.assertEqual(census.groups["prompts"], 73_728)
        self.assertEqual(census.total, census.learnable + census.groups["lpm"])
        self.assertTrue(0.0073 <= census.ratio <= 0.0133)
        self.assertAlmostEqual(census.groups["lpm"] / 86e6, 1.0, delta=0.02)

    def test_groups_add_up(self):
        census = config_census(toy_config())
        self.assertEqual(sum(census.groups.values()), census.total)

    def test_assembled_model_matches_architecture(self):
        cfg = toy_config()
        model = FptModel.initialize(cfg, seed=0)
        counted, derived = param_census(model), config_census(cfg)
        self.assertEqual(counted.groups, derived.groups)
        self.assertEqual(counted.learnable, derived.learnable)
        self.assertEqual(counted.total, derived.total)
        self.assertEqual(counted.learnable, sum(t.size for t in model.learnable_parameters().values()))

    def test_report(self):
        census = config_census(FptConfig())
        report = efficiency_report(census, 87.12, peak_method=736, peak_full=23128)
        self.assertAlmostEqual(report.pme, 85.94, delta=0.01)
        self.assertAlmostEqual(report.r, census.ratio)
        self.assertIsNone(efficiency_report(census, 87.12).pme)


class TestMemoryPeaks(unittest.TestCase):
    """Ledger peaks of single optimization steps at a small scale."""

    def test_reproducible(self):
        cfg = toy_config()
        self.assertEqual(measure_fpt_peak(cfg), measure_fpt_peak(cfg))

    def test_inference_below_training(self):
        cfg = toy_config()
        self.assertLess(measure_inference_peak(cfg), measure_fpt_peak(cfg))

    def test_fpt_step_far_below_full_finetune(self):
        cfg = _wide_config()
        self.assertLess(measure_fpt_peak(cfg), measure_full_finetune_peak(cfg.lpm) / 4)

    def test_linear_probe_below_full_finetune(self):
        cfg = _wide_config()
        self.assertLess(measure_linear_probe_peak(cfg.lpm), measure_full_finetune_peak(cfg.lpm))

    def test_full_finetune_grows_with_resolution(self):
        peaks = [measure_full_finetune_peak(toy_vit(image_size=size, dim=32, heads=2)) for size in (32, 64, 128)]
        self.assertLess(peaks[0], peaks[1])
        self.assertLess(peaks[1], peaks[2])

    def test_component_ablation_ordering(self):
        rows = component_ablation(_wide_config())
        self.assertEqual(len(rows), 5)
        peaks = [row.peak_bytes for row in rows]
        self.assertTrue(all(p > 0 for p in peaks))
        self.assertLess(peaks[2], peaks[1])   # low-resolution side input
        self.assertLess(peaks[3], peaks[2])   # important tokens only
        self.assertLessEqual(peaks[4], peaks[3])   # preloaded features

    @unittest.skipUnless(RUN_SLOW, "set FPT_RUN_SLOW=1 to run ViT-B memory measurements")
    def test_vit_base_at_512(self):
        """At the default geometry an FPT+ step needs under a quarter of full fine-tuning."""
        cfg = FptConfig()
        self.assertLess(measure_fpt_peak(cfg), measure_full_finetune_peak(cfg.lpm) / 4)
        peaks = [measure_full_finetune_peak(ViTConfig(image_size=size)) for size in (128, 256, 512)]
        self.assertLess(peaks[0], peaks[1])
        self.assertLess(peaks[1], peaks[2])


class TestSelectionMaps(unittest.TestCase):
    """PGM export of the selected token positions."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.selected = SelectedFeatures(12, np.array([0, 5, 15]), Tensor(np.zeros((2, 3, 4))),
                                         Tensor(np.zeros((2, 3, 4))))

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_mask_counts_selected_cells(self):
        cells, mask = selection_map_arrays(self.selected, 4)
        self.assertEqual(int((mask == 255).sum()), 3)
        self.assertEqual(mask[1, 1], 255)
        self.assertEqual(mask[3, 3], 255)
        np.testing.assert_array_equal(cells, mask)

    def test_full_ratio_covers_grid(self):
        selected = SelectedFeatures(1, np.arange(16), Tensor(np.zeros((1, 16, 2))), Tensor(np.zeros((1, 16, 2))))
        _, mask = selection_map_arrays(selected, 4)
        self.assertTrue((mask == 255).all())

    def test_attention_weighting(self):
        attention = np.zeros((2, 4, 3))
        attention[0, :, 1] = 1.0
        attention[1, :, 2] = 0.5
        cells, _ = selection_map_arrays(self.selected, 4, attention)
        self.assertEqual(cells[1, 1], 255)
        self.assertEqual(cells[3, 3], 128)
        self.assertEqual(cells[0, 0], 0)

    def test_export_is_deterministic_pgm(self):
        first, first_mask = export_selection_map(self.selected, 4, os.path.join(self.temp_dir, "a", "map.pgm"))
        second, _ = export_selection_map(self.selected, 4, os.path.join(self.temp_dir, "b", "map.pgm"))
        self.assertEqual(first_mask.name, "map_mask.pgm")
        with open(first, "rb") as a, open(second, "rb") as b:
            data = a.read()
            self.assertEqual(data, b.read())
        self.assertTrue(data.startswith(b"P5"))

    def test_invalid_selection(self):
        batched = SelectedFeatures(1, np.zeros((2, 3), dtype=np.int64), Tensor(np.zeros((2, 1, 3, 2))),
                                   Tensor(np.zeros((2, 1, 3, 2))))
        with self.assertRaises(ContractError):
            selection_map_arrays(batched, 4)
        with self.assertRaises(ContractError):
            selection_map_arrays(self.selected, 3)

    def test_prompt_profile_csv(self):
        path = os.path.join(self.temp_dir, "profile.csv")
        write_prompt_profile(path, [0.25, 0.5])
        with open(path) as f:
            self.assertEqual(f.read(), "side_layer,prompt_attention\n1,0.250000\n2,0.500000\n")


if __name__ == '__main__':
    unittest.main()
