"""Finite-size scaling of the Liouvillian gap and the SP/SMP decision rule."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import liouville
from .hilbert import HilbertSpace, SystemParams
from .persist import SpectrumCache, cache_key

log = logging.getLogger(__name__)

SP, SMP = "SP", "SMP"


@dataclass
class ScalingSeries:
    """Points (ratio, delta) sorted by ratio; ratio is w0/Omega or gamma/w0."""
    points: list
    fixed: str = ""
    meta: list = field(default_factory=list)

    def __post_init__(self):
        order = sorted(range(len(self.points)), key=lambda i: self.points[i][0])
        self.points = [(float(self.points[i][0]), float(self.points[i][1])) for i in order]
        if self.meta:
            self.meta = [self.meta[i] for i in order]
        if any(d < 0 for _, d in self.points):
            raise ValueError("gaps must be non-negative")

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r for r, _ in self.points])

    @property
    def deltas(self) -> np.ndarray:
        return np.array([d for _, d in self.points])

    def __len__(self):
        return len(self.points)


@dataclass
class FitResult:
    a: float
    b: float
    c: float
    residual: float                 # RMS of the fit residuals
    cov: np.ndarray
    n_points: int

    @property
    def extrapolate(self) -> float:
        return self.a

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return self.a + self.b * r + self.c * r ** 2

    def as_dict(self) -> dict:
        se = self.stderr
        return {"a": self.a, "b": self.b, "c": self.c, "residual": self.residual,
                "stderr": {"a": se[0], "b": se[1], "c": se[2]}, "cov": self.cov.tolist(),
                "n_points": self.n_points}


def polyfit2(series, min_points: int = 4) -> FitResult:
    """Least-squares a + b r + c r^2.

    The covariance is s^2 (V^T V)^-1 with s^2 the residual variance over n - 3 degrees of
    freedom; with exactly three points it is infinite.
    """
    pts = series.points if isinstance(series, ScalingSeries) else sorted(map(tuple, series))
    if len(pts) < min_points:
        raise ValueError(f"need at least {min_points} points, got {len(pts)}")
    r = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    V = np.vander(r, 3, increasing=True)
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    res = y - V @ coef
    rms = float(math.sqrt(np.mean(res ** 2)))
    dof = len(r) - 3
    VtV_inv = np.linalg.inv(V.T @ V)
    cov = VtV_inv * (float(res @ res) / dof) if dof > 0 else np.full((3, 3), math.inf)
    return FitResult(float(coef[0]), float(coef[1]), float(coef[2]), rms, cov, len(r))


def drop_last_check(series: ScalingSeries) -> dict:
    """Refit without the largest-ratio point; flags a shift of a beyond its standard error."""
    full = polyfit2(series)
    sub = polyfit2(ScalingSeries(series.points[:-1], series.fixed), min_points=4)
    shift = abs(sub.a - full.a)
    return {"a_full": full.a, "a_dropped": sub.a, "shift": shift, "stable": bool(shift < full.stderr[0])}


def classify(delta_inf: float, stderr: float, factor: float = 10.0) -> str:
    """SP if the extrapolated gap is indistinguishable from zero, else SMP."""
    return SP if delta_inf < factor * stderr else SMP


def gamma_dependence(series: ScalingSeries, factor: float = 10.0) -> tuple[FitResult, str]:
    """Quadratic fit of Delta_inf(gamma) and the classification of its gamma -> 0 value."""
    fit = polyfit2(series)
    return fit, classify(fit.a, float(fit.stderr[0]), factor)


# --- gap scans ---------------------------------------------------------------

@dataclass
class ScanPoint:
    Omega: float
    fock_cutoff: int
    gap: float
    eigenvalues: np.ndarray
    cached: bool = False


def gap_point(params: SystemParams, k: int = 6, fock_cutoff: int | None = None,
              cache: SpectrumCache | None = None, tail_limit: float = 1e-6) -> ScanPoint:
    """Gap at one parameter set; cutoff from the tail-converged rule unless given."""
    if fock_cutoff is None:
        res = liouville.converged_cutoff(params, limit=tail_limit)
        N, L = res.space.fock_cutoff, res.liouvillian
    else:
        N, L = fock_cutoff, None
    key = cache_key(params, N, k)
    if cache is not None:
        hit = cache.load(key)
        if hit is not None:
            vals = hit[0]
            return ScanPoint(params.Omega, N, liouville.gap_from_spectrum(vals).delta, vals, True)
    if L is None:
        L = liouville.build(params, HilbertSpace(N))
    vals = liouville.slow_eigenvalues(L, k=k)
    if cache is not None:
        cache.store(key, vals, {"params": params.as_dict(), "N": N, "k": k})
    return ScanPoint(params.Omega, N, liouville.gap_from_spectrum(vals).delta, vals)


def scan_gap(template: SystemParams, omegas, lambda_ratio: float = 1.4, k: int = 6,
             cache_dir=None, threads: int = 1, fock_cutoffs: dict | None = None) -> ScalingSeries:
    """Gap versus w0/Omega at fixed lambda^2/(Omega w0), i.e. lambda = ratio sqrt(w0 Omega/2)."""
    cache = SpectrumCache(cache_dir) if cache_dir else None
    fock_cutoffs = fock_cutoffs or {}

    def one(Om):
        p = SystemParams.from_ratio(lambda_ratio, omega0=template.omega0, Omega=Om,
                                    kappa=template.kappa, gamma=template.gamma)
        pt = gap_point(p, k=k, fock_cutoff=fock_cutoffs.get(Om), cache=cache)
        log.info("Omega=%g N=%d gap=%.6g%s", Om, pt.fock_cutoff, pt.gap, " (cached)" if pt.cached else "")
        return pt

    omegas = list(omegas)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            pts = list(pool.map(one, omegas))
    else:
        pts = [one(Om) for Om in omegas]
    return ScalingSeries([(template.omega0 / pt.Omega, pt.gap) for pt in pts],
                         fixed=f"lambda = {lambda_ratio} sqrt(w0 Omega / 2), gamma = {template.gamma}",
                         meta=[{"Omega": pt.Omega, "N": pt.fock_cutoff, "cached": pt.cached} for pt in pts])
