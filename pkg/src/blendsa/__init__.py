"""Blended IPW / multiple-imputation analysis with delta-adjusted
sensitivity analysis for missing-not-at-random data."""

from .engine import BlendedFit, ModularizationSpec, load_spec, run_blended
from .tabular import ColumnTable, read_csv, write_csv

__version__ = "0.1.0"

__all__ = [
    "BlendedFit",
    "ColumnTable",
    "ModularizationSpec",
    "load_spec",
    "read_csv",
    "run_blended",
    "write_csv",
    "__version__",
]
