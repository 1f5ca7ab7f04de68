"""Inverse-consistent elastic registration of 3D volumes with intensity-shift filtering."""

import os as _os

# The numba worker pool is sized once, at import. ELASTREG_THREADS may ask for
# more workers than cores (useful for thread-count independence checks).
_req = _os.environ.get("ELASTREG_THREADS", "").strip()
if _req.isdigit() and int(_req) > 0 and "NUMBA_NUM_THREADS" not in _os.environ:
    _os.environ["NUMBA_NUM_THREADS"] = str(max(int(_req), _os.cpu_count() or 1))

import numba as _numba  # noqa: E402

# prefer OpenMP; the bundled TBB is often too old and only produces a warning
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .energy import (EnergyBreakdown, consistency_energy, distance_energy,  # noqa: E402
                     elastic_energy, estimate_shift, force_consistency, force_distance)
from .errors import (ElastRegError, FormatError, GridMismatchError,  # noqa: E402
                     InvalidParameterError, NoInformationError, NumericalError, PairingError,
                     PhantomGenerationError)
from .evaluation import (AccuracyReport, ReportRow, build_report,  # noqa: E402
                         consistency_stats, fiducial_stats, read_report, write_report)
from .io import read_fiducials, read_vol3, write_fiducials, write_vol3  # noqa: E402
from .phantom import (Fiducial, FiducialSet, PhantomPair, PhantomSpec,  # noqa: E402
                      make_phantom_pair)
from .pipeline import PipelineResult, register_pair  # noqa: E402
from .rigid import RigidTransform, register_rigid, resample_rigid  # noqa: E402
from .solver import (RegistrationResult, SolverParams, register_elastic,  # noqa: E402
                     solve_level)
from .volume import (DisplacementField, GaussianPyramid, Grid, ScalarVolume,  # noqa: E402
                     build_pyramid, compose_fields, gaussian_smooth, sample_trilinear,
                     upsample_field, warp_volume)

__version__ = "0.1.0"

__all__ = [
    "AccuracyReport", "DisplacementField", "ElastRegError", "EnergyBreakdown", "Fiducial",
    "FiducialSet", "FormatError", "GaussianPyramid", "Grid", "GridMismatchError",
    "InvalidParameterError", "NoInformationError", "NumericalError", "PairingError",
    "PhantomGenerationError", "PhantomPair", "PhantomSpec", "PipelineResult",
    "RegistrationResult", "ReportRow", "RigidTransform", "ScalarVolume", "SolverParams",
    "build_pyramid", "build_report",
    "compose_fields", "consistency_energy", "consistency_stats", "distance_energy",
    "elastic_energy", "estimate_shift", "fiducial_stats", "force_consistency", "force_distance",
    "gaussian_smooth", "make_phantom_pair", "read_fiducials", "read_report", "read_vol3",
    "register_elastic", "register_pair", "register_rigid", "resample_rigid", "sample_trilinear",
    "solve_level", "upsample_field", "warp_volume", "write_fiducials", "write_report", "write_vol3",
]
