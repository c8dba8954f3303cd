"""Mode reduced state, Husimi Q distribution, peak finding and x-quadrature features."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
from scipy import ndimage
from scipy.special import gammaln

from .hilbert import HilbertSpace, mode_annihilation


def partial_trace_mode(rho: np.ndarray, fock_cutoff: int | None = None) -> np.ndarray:
    """Trace out the spin: rho_B[n, m] = sum_s rho[(s, n), (s, m)]."""
    d = rho.shape[0]
    N = fock_cutoff or d // 2
    r = rho.reshape(2, N, 2, N)
    return np.einsum("anam->nm", r)


def partial_trace_spin(rho: np.ndarray) -> np.ndarray:
    N = rho.shape[0] // 2
    return np.einsum("anbn->ab", rho.reshape(2, N, 2, N))


def coherent_vectors(alpha: np.ndarray, n_levels: int) -> np.ndarray:
    """Rows are Fock amplitudes of |alpha> truncated to n_levels (not renormalized)."""
    alpha = np.asarray(alpha, dtype=complex).ravel()
    n = np.arange(n_levels)
    with np.errstate(divide="ignore", invalid="ignore"):
        logmag = n[None, :] * np.log(np.abs(alpha)[:, None]) - 0.5 * gammaln(n + 1)[None, :]
    logmag[:, 0] = 0.0
    phase = np.exp(1j * n[None, :] * np.angle(alpha)[:, None])
    amp = np.exp(logmag - 0.5 * np.abs(alpha)[:, None] ** 2) * phase
    amp[np.abs(alpha) == 0, 1:] = 0.0
    return amp


def coherent_state(alpha: complex, space: HilbertSpace, spin: int | None = None) -> np.ndarray:
    """Normalized truncated coherent state, optionally tensored with a spin basis state."""
    v = coherent_vectors(np.array([alpha]), space.fock_cutoff)[0]
    v = v / np.linalg.norm(v)
    if spin is None:
        return v
    out = np.zeros(space.dim, dtype=complex)
    out[spin * space.fock_cutoff:(spin + 1) * space.fock_cutoff] = v
    return out


@dataclass
class QGrid:
    x: np.ndarray
    p: np.ndarray
    values: np.ndarray          # values[i, j] = Q at (x[i], p[j])
    warnings: list[str] = field(default_factory=list)

    @property
    def cell_area(self) -> float:
        """Cell area in the alpha plane, d^2 alpha = dx dp / 2."""
        return float((self.x[1] - self.x[0]) * (self.p[1] - self.p[0]) / 2)

    @property
    def x_range(self):
        return float(self.x[0]), float(self.x[-1])

    @property
    def p_range(self):
        return float(self.p[0]), float(self.p[-1])

    def total(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def boundary_mass(self) -> float:
        v = self.values
        edge = v[0, :].sum() + v[-1, :].sum() + v[1:-1, 0].sum() + v[1:-1, -1].sum()
        return float(edge / max(v.sum(), 1e-300))

    def log_values(self, floor: float = 1e-300) -> np.ndarray:
        return np.log10(np.maximum(self.values, floor))

    def export(self, stem, log: bool = False) -> tuple:
        """Write ``<stem>.csv`` (row i = x[i], column j = p[j]) and a ``<stem>.json`` sidecar."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        data = self.log_values() if log else self.values
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            for row in data:
                w.writerow([repr(float(v)) for v in row])
        side = {"x_range": self.x_range, "p_range": self.p_range, "nx": len(self.x), "np": len(self.p),
                "dx": float(self.x[1] - self.x[0]), "dp": float(self.p[1] - self.p[0]),
                "cell_area": self.cell_area, "scale": "log10" if log else "linear",
                "total": self.total(), "warnings": list(self.warnings)}
        json_path.write_text(json.dumps(side, indent=2) + "\n")
        return csv_path, json_path


def auto_halfwidth(xbar: float, spread: float = 0.0) -> float:
    """Grid half-width: 1.5 x the mean-field displacement, padded for the peak width."""
    return max(1.5 * abs(xbar), abs(xbar) + 5.0 + 3.0 * spread, 6.0)


def husimi_q(rho_B: np.ndarray, x_range=None, p_range=None, nx: int = 201, np_: int = 201,
             xbar: float = 0.0, coverage_tol: float = 1e-3) -> QGrid:
    """Q(alpha) = <alpha|rho_B|alpha>/pi with alpha = (x + i p)/sqrt2 on a rectangular grid."""
    N = rho_B.shape[0]
    if x_range is None:
        h = auto_halfwidth(xbar)
        x_range = (-h, h)
    if p_range is None:
        p_range = x_range
    xs = np.linspace(x_range[0], x_range[1], nx)
    ps = np.linspace(p_range[0], p_range[1], np_)
    X, P = np.meshgrid(xs, ps, indexing="ij")
    alpha = (X + 1j * P).ravel() / math.sqrt(2)
    Q = np.empty(alpha.size)
    chunk = 20000
    for s in range(0, alpha.size, chunk):
        C = coherent_vectors(alpha[s:s + chunk], N)
        Q[s:s + chunk] = np.real(np.einsum("kn,nm,km->k", C.conj(), rho_B, C)) / math.pi
    grid = QGrid(xs, ps, Q.reshape(nx, np_))
    bm = grid.boundary_mass()
    if bm > coverage_tol:
        msg = f"Q grid too small: boundary carries {bm:.2e} of the total"
        grid.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return grid


@dataclass(frozen=True)
class Peak:
    x: float
    p: float
    height: float
    plateau: bool = False


def find_peaks(grid: QGrid, rel_threshold: float = 0.05) -> list[Peak]:
    """Local maxima (8-neighbourhood) above rel_threshold * global max, tallest first.

    A flat plateau counts once, at its lexicographically lowest (x, p) cell, and is flagged.
    """
    if not 0 < rel_threshold < 1:
        raise ValueError("rel_threshold must lie in (0, 1)")
    v = grid.values
    vmax = v.max()
    mx = ndimage.maximum_filter(v, size=3, mode="constant", cval=-np.inf)
    mask = (v >= mx) & (v >= rel_threshold * vmax)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
    peaks = []
    for lab in range(1, count + 1):
        idx = np.argwhere(labels == lab)
        i, j = idx[np.lexsort((idx[:, 1], idx[:, 0]))[0]]
        peaks.append(Peak(float(grid.x[i]), float(grid.p[j]), float(v[i, j]), plateau=len(idx) > 1))
    peaks.sort(key=lambda pk: (-pk.height, pk.x, pk.p))
    return peaks


# --- x-quadrature features -----------------------------------------------------

@dataclass(frozen=True)
class QuadratureBasis:
    nodes: np.ndarray       # eigenvalues of the truncated x, ascending
    vectors: np.ndarray     # columns: x eigenvectors in the Fock basis

    @classmethod
    def for_space(cls, space: HilbertSpace) -> "QuadratureBasis":
        return quadrature_basis(space)


def quadrature_basis(space: HilbertSpace | int) -> QuadratureBasis:
    N = space if isinstance(space, int) else space.fock_cutoff
    a = mode_annihilation(N).toarray()
    x = np.real(a + a.T) / math.sqrt(2)
    off = np.diag(x, 1)
    nodes, vecs = la.eigh_tridiagonal(np.zeros(N), off)
    # fix the sign so the vacuum overlap is non-negative (the features do not care)
    sign = np.sign(vecs[0, :])
    sign[sign == 0] = 1
    return QuadratureBasis(nodes, vecs * sign)


def eigenstate_feature(psi: np.ndarray, basis: QuadratureBasis) -> np.ndarray:
    """P_psi(s, x_j) = |<s, x_j|psi>|^2 as a (2, N) array; row 0 = spin up."""
    N = basis.nodes.size
    amps = psi.reshape(2, N) @ basis.vectors.conj()
    P = np.abs(amps) ** 2
    return P / P.sum()
