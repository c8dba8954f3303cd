"""Mean-field dynamics of (<x>, <p>, <sx>, <sy>, <sz>): fixed points, critical coupling,
linear stability and strong-perturbation quenches."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import StiffnessError
from .hilbert import SystemParams

PARITY_PRESERVING = "parity-preserving"
BREAKING_PLUS = "parity-breaking-plus"
BREAKING_MINUS = "parity-breaking-minus"


@dataclass(frozen=True)
class MFState:
    x: float = 0.0
    p: float = 0.0
    sx: float = 0.0
    sy: float = 0.0
    sz: float = -1.0

    def array(self) -> np.ndarray:
        return np.array([self.x, self.p, self.sx, self.sy, self.sz], dtype=float)

    @classmethod
    def from_array(cls, v) -> "MFState":
        return cls(*(float(c) for c in v))

    def bloch_norm(self) -> float:
        return math.sqrt(self.sx ** 2 + self.sy ** 2 + self.sz ** 2)

    def parity_image(self) -> "MFState":
        return MFState(-self.x, -self.p, -self.sx, -self.sy, self.sz)


def rhs(params: SystemParams, s) -> np.ndarray:
    x, p, sx, sy, sz = s.array() if isinstance(s, MFState) else s
    w0, Om, lam, k, g = params.omega0, params.Omega, params.lam, params.kappa, params.gamma
    return np.array([
        -k * x + w0 * p,
        -k * p - w0 * x - lam * sx,
        -g * sx - Om * sy,
        -g * sy + Om * sx - 2 * lam * x * sz,
        -2 * g * sz + 2 * lam * x * sy - 2 * g,
    ])


def critical_coupling(params: SystemParams) -> float:
    """sqrt((w0 Omega/2)(1 + gamma^2/Omega^2)(1 + kappa^2/w0^2))"""
    return math.sqrt(params.omega0 * params.Omega / 2 * (1 + params.gamma ** 2 / params.Omega ** 2)
                     * (1 + params.kappa ** 2 / params.omega0 ** 2))


@dataclass
class FixedPoint:
    state: MFState
    branch: str
    physical: bool
    stability: str = "unknown"
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(5, complex))


def _breaking_state(params: SystemParams, sign: int) -> MFState:
    w0, Om, lam, k, g = params.omega0, params.Omega, params.lam, params.kappa, params.gamma
    lc2 = critical_coupling(params) ** 2
    r = lc2 / lam ** 2
    sz = -r
    sx2 = 2 / (1 + g ** 2 / Om ** 2) * r * (1 - r)
    sx = sign * math.sqrt(sx2) if sx2 >= 0 else sign * math.nan
    sy = -g / Om * sx
    x = -lam / w0 / (1 + k ** 2 / w0 ** 2) * sx
    p = k / w0 * x
    return MFState(x, p, sx, sy, sz)


def classify(eigenvalues: np.ndarray, tol: float = 1e-12) -> str:
    re = np.real(eigenvalues)
    n_pos = int(np.sum(re > tol))
    if n_pos == 0 and np.all(re < -tol):
        return "stable"
    if n_pos == 1:
        return "saddle"
    if n_pos == 0:
        return "marginal"
    return "unstable"


def fixed_points(params: SystemParams, with_stability: bool = True) -> list[FixedPoint]:
    """The parity-preserving point always; the breaking pair, marked physical iff lam > lam_c.

    Below lam_c the breaking pair has sz < -1 and imaginary sx; those entries are returned
    with NaN spin/position components and ``physical=False``.
    """
    out = [FixedPoint(MFState(), PARITY_PRESERVING, True)]
    lam_c = critical_coupling(params)
    physical = params.lam > lam_c
    if params.lam > 0:
        for sign, branch in ((1, BREAKING_PLUS), (-1, BREAKING_MINUS)):
            out.append(FixedPoint(_breaking_state(params, sign), branch, physical))
    if with_stability:
        for fp in out:
            if fp.physical:
                ev = np.linalg.eigvals(stability_matrix(params, fp))
                fp.eigenvalues = ev
                fp.stability = classify(ev)
    return out


def stability_matrix(params: SystemParams, fp, as_printed: bool = False) -> np.ndarray:
    """Linearization of the mean-field flow at ``fp``.

    The (sz, x) entry is d(dsz/dt)/dx = +2 lam <sy>_s.  ``as_printed=True`` uses the
    literature form with -2 lam <sy>_s there; the two differ only at the breaking points,
    by O(gamma/Omega).
    """
    s = fp.state if isinstance(fp, FixedPoint) else fp
    w0, Om, lam, k, g = params.omega0, params.Omega, params.lam, params.kappa, params.gamma
    sign = -1.0 if as_printed else 1.0
    return np.array([
        [-k, w0, 0, 0, 0],
        [-w0, -k, -lam, 0, 0],
        [0, 0, -g, -Om, 0],
        [-2 * lam * s.sz, 0, Om, -g, -2 * lam * s.x],
        [sign * 2 * lam * s.sy, 0, 0, 2 * lam * s.x, -2 * g],
    ])


def numerical_jacobian(params: SystemParams, s: MFState, h: float = 1e-6) -> np.ndarray:
    v = s.array()
    J = np.zeros((5, 5))
    for j in range(5):
        e = np.zeros(5)
        e[j] = h
        J[:, j] = (rhs(params, v + e) - rhs(params, v - e)) / (2 * h)
    return J


# --- quenches and integration -----------------------------------------------------

def quench_np(params: SystemParams, r: float, theta: float) -> MFState:
    """<x> = r cos 2theta, <p> = r sin 2theta; spin left at the parity-preserving values."""
    return MFState(r * math.cos(2 * theta), r * math.sin(2 * theta), 0.0, 0.0, -1.0)


def quench_smp(params: SystemParams, fp: FixedPoint, theta: float) -> MFState:
    """Rotate (sx, sz) of a parity-breaking point by theta; other components unchanged."""
    if fp.branch == PARITY_PRESERVING:
        raise ValueError("quench_smp needs a parity-breaking fixed point")
    s = fp.state
    c, sn = math.cos(theta), math.sin(theta)
    return MFState(s.x, s.p, c * s.sx + sn * s.sz, s.sy, c * s.sz - sn * s.sx)


@dataclass
class MFTrajectory:
    t: np.ndarray
    y: np.ndarray    # shape (n_times, 5)

    def states(self) -> list[MFState]:
        return [MFState.from_array(r) for r in self.y]

    @property
    def final(self) -> MFState:
        return MFState.from_array(self.y[-1])


def integrate(params: SystemParams, s0: MFState, t_max: float, tol: float = 1e-9,
              n_out: int = 2001, method: str = "DOP853") -> MFTrajectory:
    """Adaptive embedded Runge-Kutta integration of the mean-field equations."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    t_eval = np.linspace(0.0, t_max, n_out)
    sol = solve_ivp(lambda t, y: rhs(params, y), (0.0, t_max), s0.array(), method=method,
                    t_eval=t_eval, rtol=tol, atol=tol * 1e-3)
    if sol.status == -1:
        raise StiffnessError(f"mean-field integration failed: {sol.message}")
    return MFTrajectory(sol.t, sol.y.T)


def settle(traj: MFTrajectory, targets: list[FixedPoint], tol: float = 1e-6, hold: float = 10.0):
    """Fixed point the trajectory stays within ``tol`` of for the final ``hold`` time units.

    Returns the matching FixedPoint, or None ("unresolved") if no target qualifies.
    """
    tail = traj.t >= traj.t[-1] - hold
    for fp in targets:
        d = np.linalg.norm(traj.y[tail] - fp.state.array(), axis=1)
        if np.all(d < tol):
            return fp
    return None


def settle_time(traj: MFTrajectory, fp: FixedPoint, tol: float = 1e-6) -> float:
    """First time after which the trajectory stays within tol of fp (inf if never)."""
    d = np.linalg.norm(traj.y - fp.state.array(), axis=1)
    out = np.nonzero(d >= tol)[0]
    if out.size == 0:
        return float(traj.t[0])
    if out[-1] == len(d) - 1:
        return math.inf
    return float(traj.t[out[-1] + 1])


def bloch_norms(traj: MFTrajectory) -> np.ndarray:
    return np.linalg.norm(traj.y[:, 2:], axis=1)
