"""Rate and distortion metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial import cKDTree

from .errors import ValidationError

NORMAL_NEIGHBORS = 9


@dataclass(frozen=True)
class RdPoint:
    rate: float
    d1: float = float("nan")
    d2: float = float("nan")
    chamfer: float = float("nan")


def _pts(p) -> np.ndarray:
    a = np.asarray(getattr(p, "points", p), dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise ValidationError("metrics need non-empty clouds")
    return a


def bpip(frame_or_bytes, n_input: int) -> float:
    """Total frame bits (header included) per input point."""
    if n_input <= 0:
        raise ValidationError("input point count must be positive")
    if isinstance(frame_or_bytes, (bytes, bytearray)):
        nbytes = len(frame_or_bytes)
    elif isinstance(frame_or_bytes, int):
        nbytes = frame_or_bytes
    else:
        nbytes = len(frame_or_bytes.to_bytes())
    return 8.0 * nbytes / n_input


def _nn(src: np.ndarray, ref: np.ndarray):
    d, i = cKDTree(ref).query(src, k=1)
    return d, i


def chamfer(a, b) -> float:
    """Max of the two directed mean nearest-neighbor distances."""
    a, b = _pts(a), _pts(b)
    return float(max(_nn(a, b)[0].mean(), _nn(b, a)[0].mean()))


def _psnr(mse: float, peak: float) -> float:
    if peak <= 0:
        raise ValidationError("peak must be positive")
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(3.0 * peak * peak / mse))


def d1_psnr(p, q, peak: float) -> float:
    p, q = _pts(p), _pts(q)
    mse = max(float(np.mean(_nn(p, q)[0] ** 2)), float(np.mean(_nn(q, p)[0] ** 2)))
    return _psnr(mse, peak)


def estimate_normals(points: np.ndarray, k: int = NORMAL_NEIGHBORS) -> np.ndarray:
    """PCA normals over k nearest neighbors; sign fixed to +z, then +y, then +x."""
    pts = _pts(points)
    if len(pts) < k:
        raise ValidationError(f"normal estimation needs at least {k} points")
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.zeros(len(normals), dtype=bool)
    decided = np.zeros(len(normals), dtype=bool)
    for axis in (2, 1, 0):
        c = normals[:, axis]
        nz = (np.abs(c) > 1e-12) & ~decided
        flip |= nz & (c < 0)
        decided |= nz
    normals[flip] *= -1.0
    return normals


def _plane_mse(src: np.ndarray, ref: np.ndarray, normals: np.ndarray) -> float:
    _, i = _nn(src, ref)
    disp = src - ref[i]
    proj = np.einsum("ij,ij->i", disp, normals[i])
    return float(np.mean(proj**2))


def d2_psnr(p, q, peak: float) -> float:
    """Point-to-plane PSNR; each direction uses normals of the cloud being searched."""
    p, q = _pts(p), _pts(q)
    mse = max(_plane_mse(p, q, estimate_normals(q)), _plane_mse(q, p, estimate_normals(p)))
    return _psnr(mse, peak)


def bd_rate(curve_a, curve_b, samples: int = 1000) -> float:
    """Average rate change (%) of curve B against curve A at equal D1 PSNR."""
    ra, da = _curve(curve_a)
    rb, db = _curve(curve_b)
    lo = max(da.min(), db.min())
    hi = min(da.max(), db.max())
    if not hi > lo:
        raise ValidationError("rate-distortion curves do not overlap")
    pa = np.polyfit(da, np.log(ra), 3)
    pb = np.polyfit(db, np.log(rb), 3)
    grid = np.linspace(lo, hi, samples)
    ia = trapezoid(np.polyval(pa, grid), grid)
    ib = trapezoid(np.polyval(pb, grid), grid)
    diff = (ib - ia) / (hi - lo)
    return float((np.exp(diff) - 1.0) * 100.0)


def _curve(points) -> tuple[np.ndarray, np.ndarray]:
    pts = list(points)
    if len(pts) < 4:
        raise ValidationError("BD-rate needs at least 4 points per curve")
    r = np.array([p.rate for p in pts], dtype=np.float64)
    d = np.array([p.d1 for p in pts], dtype=np.float64)
    if np.any(r <= 0) or not np.all(np.isfinite(d)):
        raise ValidationError("rates must be positive and distortions finite")
    return r, d
