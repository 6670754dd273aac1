"""Exception types shared by every fpt-plus module.

Copyright (C) 2024 fpt-plus Contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.

Each error also derives from the closest built-in exception, so callers
that only know about ValueError, KeyError or OSError keep working. The CLI
maps these classes onto process exit codes (see cli.py).
"""


class FptError(Exception):
    """Base class for all fpt-plus errors."""


class DimensionError(FptError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(FptError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(FptError, ValueError):
    """Invalid, unknown or mismatching configuration."""


class CacheLookupError(FptError, KeyError):
    """An image id is not present in a feature cache."""

    def __str__(self):
        # KeyError quotes its argument; keep the plain message instead
        return str(self.args[0]) if self.args else ""


class DataError(FptError, OSError):
    """Unreadable or malformed input data (images, labels, binary files)."""


class UndefinedMetricError(FptError, ValueError):
    """A metric is undefined for the given labels (e.g. AUC on one class)."""


class NumericError(FptError, ArithmeticError):
    """NaN propagation or a non-finite value where a finite one is required."""
