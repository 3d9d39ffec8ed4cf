"""Python access to the vitbench virtual-imaging-trial harness."""

from ._vitbench import (
    Error,
    auc,
    delong_ci,
    delong_paired_test,
    gradcheck,
    patient_score_top_fraction,
    read_volume,
    run_cli,
    top_count,
)

__all__ = [
    "Error",
    "auc",
    "delong_ci",
    "delong_paired_test",
    "gradcheck",
    "patient_score_top_fraction",
    "read_volume",
    "run_cli",
    "top_count",
]
