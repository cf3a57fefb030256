"""Input checks shared by the estimator and CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .preprocess import PatientCase, PreprocessedCase, check_region
from .volume_core import Volume3D


def check_volume(vol, name: str = "volume") -> Volume3D:
    if not isinstance(vol, Volume3D):
        raise TypeError(f"{name} must be a Volume3D, got {type(vol).__name__}")
    if not np.all(np.isfinite(vol.data)):
        raise ValueError(f"{name} contains non-finite values")
    return vol


def check_cases(cases, region: str = None, require_ct: bool = False) -> list:
    """Validate a non-empty sequence of cases, optionally all of one region and with CT."""
    if isinstance(cases, (PatientCase, PreprocessedCase)):
        cases = [cases]
    if not isinstance(cases, Sequence) or isinstance(cases, (str, bytes)):
        cases = list(cases)
    if len(cases) == 0:
        raise ValueError("expected at least one case")
    if region is not None:
        check_region(region)
    for case in cases:
        if not isinstance(case, (PatientCase, PreprocessedCase)):
            raise TypeError(f"expected PatientCase objects, got {type(case).__name__}")
        if region is not None and case.region != region:
            raise ValueError(f"case {case.case_id} is {case.region}, estimator is {region}")
        has_ct = case.ct is not None if isinstance(case, PatientCase) else case.ct_channels is not None
        if require_ct and not has_ct:
            raise ValueError(f"case {case.case_id} has no CT")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    return list(cases)
