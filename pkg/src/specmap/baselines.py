"""Inverse-distance-weighted completion of a masked map."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .radiomap import SampleMask, SpectrumMap


def idw_complete(masked: SpectrumMap, mask: SampleMask | np.ndarray, p: float = 2.0,
                 chunk: int = 2048) -> SpectrumMap:
    """Fill unmeasured blocks with Σ Z_i d_i^-p / Σ d_i^-p over all measured blocks.

    Distances are Euclidean between block centers, in meters.  Measured blocks
    are copied through.
    """
    measured = mask.measured if isinstance(mask, SampleMask) else np.asarray(mask, bool)
    if measured.shape != masked.values_dbm.shape:
        raise ValidationError("mask and map shapes differ")
    if p <= 0:
        raise ValidationError("power factor p must be positive")
    if not measured.any():
        raise ValidationError("IDW needs at least one measured block")
    centers = masked.grid.centers().reshape(-1, 3)
    flat_m = measured.ravel()
    src = centers[flat_m]
    z = masked.values_dbm.ravel()[flat_m]
    out = masked.values_dbm.ravel().astype(float).copy()
    targets = np.flatnonzero(~flat_m)
    for s in range(0, len(targets), chunk):
        t = targets[s:s + chunk]
        d = np.linalg.norm(centers[t, None, :] - src[None, :, :], axis=-1)
        # log-domain weights keep large p from underflowing to 0/0
        logw = -p * np.log(d)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        out[t] = (w @ z) / w.sum(axis=1)
    return SpectrumMap(masked.grid, out.reshape(masked.values_dbm.shape))
