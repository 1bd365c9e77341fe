"""EM-VAMP: sparse linear regression with learned prior and noise parameters."""

__version__ = "0.1.0"

from .problem import (BgParams, MatrixSpec, ProblemInstance, SvdMatrix, build_matrix,  # noqa: E402
                      synthesize)
from .engine import RunTrace, VampConfig, VampState, run, vamp  # noqa: E402

__all__ = [
    "BgParams", "MatrixSpec", "ProblemInstance", "SvdMatrix", "build_matrix", "synthesize",
    "RunTrace", "VampConfig", "VampState", "run", "vamp",
]
