"""Lindblad generator, steady state, low-lying spectrum and the Liouvillian gap.

Density matrices are vectorized by column stacking, ``vec(rho) = rho.flatten('F')``,
so ``vec(A rho B) = (B^T kron A) vec(rho)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .errors import ResourceError, SolverError, StiffnessError
from .hilbert import (HilbertSpace, SystemParams, annihilation, auto_cutoff, hamiltonian, parity,
                      spin_ops, tail_population)

log = logging.getLogger(__name__)

# complex128 entries of the superoperator, roughly 30 non-zeros per row incl. LU fill headroom
DEFAULT_MEMORY_BUDGET = 2 * 1024 ** 3
DENSE_SPECTRUM_LIMIT = 1600   # superoperator dimension below which "auto" uses dense eig
DEFAULT_SHIFT = 1e-6


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).flatten(order="F")


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    if dim is None:
        dim = int(round(math.sqrt(v.size)))
    return np.asarray(v).reshape((dim, dim), order="F")


def spre(a: sp.spmatrix) -> sp.csr_matrix:
    """rho -> a rho"""
    return sp.kron(sp.identity(a.shape[0], format="csr"), a, format="csr")


def spost(b: sp.spmatrix) -> sp.csr_matrix:
    """rho -> rho b"""
    return sp.kron(b.T, sp.identity(b.shape[0], format="csr"), format="csr")


def dissipator(c: sp.spmatrix, rate: float) -> sp.csr_matrix:
    """rho -> rate (2 c rho c^dag - c^dag c rho - rho c^dag c)"""
    c = sp.csr_matrix(c)
    cd = c.conj().T.tocsr()
    cdc = (cd @ c).tocsr()
    return rate * (2 * sp.kron(c.conj(), c, format="csr") - spre(cdc) - spost(cdc))


@dataclass(frozen=True)
class Liouvillian:
    space: HilbertSpace
    generator: sp.csr_matrix
    params: SystemParams

    @property
    def dim(self) -> int:
        return self.generator.shape[0]

    def apply(self, rho: np.ndarray) -> np.ndarray:
        return unvec(self.generator @ vec(rho), self.space.dim)

    def adjoint(self) -> sp.csr_matrix:
        return self.generator.conj().T.tocsr()


def superoperator_bytes(space: HilbertSpace) -> int:
    d2 = space.dim ** 2
    return d2 * 30 * 16


def build(params: SystemParams, space: HilbertSpace, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> Liouvillian:
    """Generator of d rho/dt = -i[H, rho] + D_a[rho] + D_sigma-[rho]."""
    need = superoperator_bytes(space)
    if need > memory_budget:
        raise ResourceError(f"superoperator of dimension {space.dim ** 2} needs ~{need / 2**30:.1f} GiB, "
                            f"budget is {memory_budget / 2**30:.1f} GiB")
    H = hamiltonian(params, space).entries
    a = annihilation(space).entries
    sm = spin_ops(space)["sm"].entries
    L = -1j * (spre(H) - spost(H))
    if params.kappa:
        L = L + dissipator(a, params.kappa)
    if params.gamma:
        L = L + dissipator(sm, params.gamma)
    L = sp.csr_matrix(L)
    L.eliminate_zeros()
    return Liouvillian(space, L, params)


def parity_superoperator(space: HilbertSpace) -> sp.csr_matrix:
    """rho -> P rho P^dag"""
    P = parity(space).entries
    return sp.kron(P.conj(), P, format="csr")


def trace_row(dim: int) -> np.ndarray:
    """Row vector with vec(1)^dag . vec(rho) = Tr rho."""
    return vec(np.eye(dim))


# --- steady state ------------------------------------------------------------

def _shift_lu(L: Liouvillian, sigma: complex):
    A = (L.generator - sigma * sp.identity(L.dim, format="csr")).tocsc()
    try:
        return spla.splu(A)
    except RuntimeError as exc:   # exactly singular factor
        raise SolverError(f"sparse factorization of L - {sigma} failed: {exc}") from exc


def steady_state(L: Liouvillian, sigma: float = DEFAULT_SHIFT, tol: float = 1e-10, maxiter: int = 30) -> np.ndarray:
    """Null vector of the generator by shift-invert (inverse) iteration, trace normalized.

    The start vector is the maximally mixed state; it is parity even, so the parity-odd
    slow mode is never excited even when the gap is tiny.
    """
    d = L.space.dim
    lu = _shift_lu(L, sigma)
    v = vec(np.eye(d, dtype=complex) / d)
    history = []
    for it in range(maxiter):
        v = lu.solve(v)
        tr = np.sum(v[:: d + 1])
        if not np.isfinite(tr) or abs(tr) == 0:
            raise SolverError("steady-state iteration produced a traceless vector", {"residuals": history})
        v = v / tr
        rho = unvec(v, d)
        rho = 0.5 * (rho + rho.conj().T)
        v = vec(rho)
        res = float(np.linalg.norm(L.generator @ v))
        history.append(res)
        if res < tol:
            break
    else:
        raise SolverError(f"steady state did not converge: residual {history[-1]:.3e} > {tol:.1e}",
                          {"residuals": history})
    return rho


def check_physical(rho: np.ndarray, floor: float = -1e-10) -> dict:
    """A-posteriori physicality report; nothing is projected."""
    ev = la.eigvalsh(0.5 * (rho + rho.conj().T))
    return {
        "trace": complex(np.trace(rho)),
        "hermiticity": float(np.abs(rho - rho.conj().T).max()),
        "min_eigenvalue": float(ev[0]),
        "positive": bool(ev[0] >= floor),
    }


# --- spectrum ----------------------------------------------------------------

@dataclass
class SpectralData:
    eigenvalues: np.ndarray
    right_states: list[np.ndarray]
    left_states: list[np.ndarray]
    method: str = "sparse"
    diagnostics: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def coefficients(self, rho0: np.ndarray) -> np.ndarray:
        """c_i = Tr[rho~_i^dag rho0]"""
        return np.array([np.vdot(w, rho0) for w in self.left_states])


def _order(vals: np.ndarray) -> np.ndarray:
    return np.lexsort((-vals.imag, -np.round(vals.real, 12)))


def _clusters(vals: np.ndarray, tol: float) -> list[list[int]]:
    groups: list[list[int]] = []
    for i, v in enumerate(vals):
        for g in groups:
            if abs(vals[g[0]] - v) <= tol * max(1.0, abs(v)):
                g.append(i)
                break
        else:
            groups.append([i])
    return groups


def _biorthogonalize(rvals, V, lvals, W, tol=1e-7):
    """Left vectors (columns) dual to the right ones, matched by eigenvalue cluster."""
    out = np.zeros_like(V)
    worst = 1.0
    for cl in _clusters(rvals, tol):
        lam = rvals[cl[0]]
        J = [j for j in range(W.shape[1]) if abs(np.conj(lvals[j]) - lam) <= 10 * tol * max(1.0, abs(lam))]
        if len(J) < len(cl):
            raise SolverError(f"no left eigenvector found for eigenvalue {lam:.6g}",
                              {"left_eigenvalues": np.conj(lvals)})
        G = W[:, J].conj().T @ V[:, cl]            # |J| x |C|
        # least-squares dual within the matched left subspace
        X = np.linalg.pinv(G).conj().T            # |J| x |C|, X^H G = I
        out[:, cl] = W[:, J] @ X
        worst = max(worst, np.linalg.cond(G))
    return out, worst


def _hermitian_phase(rho: np.ndarray) -> np.ndarray:
    n2 = np.vdot(rho, rho)
    c = np.vdot(rho, rho.conj().T) / n2 if n2 else 1.0
    if abs(c) < 0.5:
        return rho
    phi = 0.5 * np.angle(c)
    return rho * np.exp(1j * phi)


def _normalize(vals, V, d):
    """Steady state gets unit trace; the rest unit Frobenius norm with Hermitian phase where possible."""
    V = V.copy()
    for i in range(V.shape[1]):
        rho = unvec(V[:, i], d)
        if abs(vals[i]) < 1e-8 and abs(np.trace(rho)) > 1e-8 * np.linalg.norm(rho):
            rho = rho / np.trace(rho)
        else:
            rho = rho / np.linalg.norm(rho)
            if abs(vals[i].imag) < 1e-10:
                rho = _hermitian_phase(rho)
        V[:, i] = vec(rho)
    return V


def spectrum(L: Liouvillian, k: int = 6, sigma: complex = DEFAULT_SHIFT, method: str = "auto",
             extra: int | None = None, tol: float = 0.0, maxiter: int | None = None) -> SpectralData:
    """The ``k`` eigenvalues with largest real part and biorthogonal left/right eigenvectors.

    The sparse route collects ``k + extra`` eigenvalues closest to ``sigma`` by shift-invert
    Arnoldi and keeps the ``k`` with largest real part, so it is exact for the cluster of
    slow modes around the origin but can miss weakly damped modes at large |Im lambda|.
    A conjugate pair split by the cut is kept whole, so ``count`` may be ``k + 1``.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    n = L.dim
    d = L.space.dim
    if method == "auto":
        method = "dense" if n <= DENSE_SPECTRUM_LIMIT else "sparse"
    if method == "dense":
        A = L.generator.toarray()
        vals, VL, VR = la.eig(A, left=True, right=True)
        lvals = vals.conj()
        W = VL
        V = VR
        diag = {}
    elif method == "sparse":
        m = min(n - 2, k + (extra if extra is not None else max(k + 4, 8)))
        lu = _shift_lu(L, sigma)
        opinv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=complex)
        luh = _shift_lu(Liouvillian(L.space, L.adjoint(), L.params), np.conj(sigma))
        opinv_h = spla.LinearOperator((n, n), matvec=luh.solve, dtype=complex)
        try:
            vals, V = spla.eigs(L.generator, k=m, sigma=sigma, OPinv=opinv, which="LM", tol=tol,
                                maxiter=maxiter)
            lvals, W = spla.eigs(L.adjoint(), k=m, sigma=np.conj(sigma), OPinv=opinv_h, which="LM",
                                 tol=tol, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            raise SolverError("shift-invert Arnoldi did not converge",
                              {"converged": len(exc.eigenvalues), "requested": m}) from exc
        diag = {"searched": m, "sigma": sigma}
    else:
        raise ValueError(f"unknown method {method!r}")

    order = _order(vals)
    keep = list(order[:k])
    if len(order) > k:
        last = vals[order[k - 1]]
        nxt = vals[order[k]]
        if abs(last.imag) > 1e-10 and abs(nxt - np.conj(last)) <= 1e-7 * max(1.0, abs(last)):
            keep.append(order[k])
    rvals = vals[keep]
    Vk = _normalize(rvals, V[:, keep], d)
    Wk, cond = _biorthogonalize(rvals, Vk, lvals, W)
    diag["dual_condition"] = float(cond)
    return SpectralData(
        eigenvalues=rvals,
        right_states=[unvec(Vk[:, i], d) for i in range(len(keep))],
        left_states=[unvec(Wk[:, i], d) for i in range(len(keep))],
        method=method,
        diagnostics=diag,
    )


def conjugate_closed(vals: np.ndarray, tol: float = 1e-7) -> bool:
    for v in vals:
        if abs(v.imag) > tol and np.min(np.abs(vals - np.conj(v))) > tol * max(1.0, abs(v)):
            return False
    return True


# --- gap ---------------------------------------------------------------------

@dataclass
class GapResult:
    delta: float
    lambda1: complex
    metastable_dim: int
    ratios: list[float]
    warning: str | None = None
    eigenvalues: np.ndarray | None = None

    @property
    def lifetime(self) -> float:
        return math.inf if self.delta == 0 else 1.0 / self.delta


def gap_from_spectrum(spectral: SpectralData, ratio_threshold: float = 0.2, degeneracy_tol: float = 1e-9) -> GapResult:
    """Delta = -Re lambda_1 and the metastable-manifold size from the real-part ratio test.

    ``spectral`` is a SpectralData or an array of eigenvalues sorted by decreasing real part.
    """
    vals = spectral.eigenvalues if isinstance(spectral, SpectralData) else np.asarray(spectral, dtype=complex)
    if len(vals) < 3:
        raise ValueError("gap analysis needs at least three eigenvalues")
    re = -vals.real
    lam1 = complex(vals[1])
    ratios = []
    m = 0
    for i in range(1, len(vals) - 1):
        r = re[i] / re[i + 1] if re[i + 1] > 0 else math.inf
        ratios.append(float(r))
        if m == 0 and r < ratio_threshold:
            m = i
    warn = None
    if abs(vals[1].real - vals[2].real) < degeneracy_tol * max(1.0, abs(vals[1])) and abs(vals[1].imag) < 1e-12:
        warn = "lambda_1 and lambda_2 have (nearly) equal real parts; metastable dimension ambiguous"
    if m == 0:
        warn = (warn + "; " if warn else "") + "no real-part ratio below threshold within the computed eigenvalues"
    return GapResult(delta=float(max(0.0, re[1])), lambda1=lam1, metastable_dim=m, ratios=ratios,
                     warning=warn, eigenvalues=vals)


def slow_eigenvalues(L: Liouvillian, k: int = 6, sigma: complex = DEFAULT_SHIFT, method: str = "auto",
                     extra: int | None = None, tol: float = 0.0) -> np.ndarray:
    """Eigenvalues only, same selection rule as ``spectrum`` (no left/right vectors)."""
    n = L.dim
    if method == "auto":
        method = "dense" if n <= DENSE_SPECTRUM_LIMIT else "sparse"
    if method == "dense":
        vals = la.eigvals(L.generator.toarray())
    elif method == "sparse":
        m = min(n - 2, k + (extra if extra is not None else max(k + 4, 8)))
        lu = _shift_lu(L, sigma)
        opinv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=complex)
        try:
            vals = spla.eigs(L.generator, k=m, sigma=sigma, OPinv=opinv, which="LM", tol=tol,
                             return_eigenvectors=False)
        except spla.ArpackNoConvergence as exc:
            raise SolverError("shift-invert Arnoldi did not converge",
                              {"converged": len(exc.eigenvalues), "requested": m}) from exc
    else:
        raise ValueError(f"unknown method {method!r}")
    order = _order(vals)
    keep = list(order[:k])
    if len(order) > k:
        last, nxt = vals[order[k - 1]], vals[order[k]]
        if abs(last.imag) > 1e-10 and abs(nxt - np.conj(last)) <= 1e-7 * max(1.0, abs(last)):
            keep.append(order[k])
    return vals[keep]


def gap(L: Liouvillian, k: int = 6, ratio_threshold: float = 0.2, **kw) -> GapResult:
    return gap_from_spectrum(slow_eigenvalues(L, k=max(3, k), **kw), ratio_threshold)


# --- propagation -------------------------------------------------------------

def propagate(L: Liouvillian, rho0: np.ndarray, t_grid, method: str = "DOP853", rtol: float = 1e-9,
              atol: float = 1e-11) -> list[np.ndarray]:
    """rho(t) = exp(L t) rho0 by adaptive integration of the vectorized equation.

    The spectrum is dominated by weakly damped oscillations, where an explicit embedded
    pair is far cheaper than BDF; "BDF" and "Radau" (with the sparse Jacobian) remain
    available for strongly damped cases.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    d = L.space.dim
    G = L.generator
    kw = {}
    if method in ("BDF", "Radau"):
        kw["jac"] = G.tocsc()
    sol = solve_ivp(lambda t, y: G @ y, (t_grid[0], t_grid[-1]), vec(rho0).astype(complex),
                    method=method, t_eval=t_grid, rtol=rtol, atol=atol, **kw)
    if sol.status == -1:
        raise StiffnessError(f"integration failed: {sol.message}", {"t": float(sol.t[-1]) if sol.t.size else None})
    return [unvec(sol.y[:, i], d) for i in range(sol.y.shape[1])]


def expect(op, rhos) -> np.ndarray:
    """Tr[O rho] along a list of density matrices."""
    O = op.entries if hasattr(op, "entries") else sp.csr_matrix(op)
    return np.array([(O.multiply(r.T)).sum() for r in rhos])


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    ev = la.eigvalsh(0.5 * ((a - b) + (a - b).conj().T))
    return 0.5 * float(np.abs(ev).sum())


# --- cutoff convergence --------------------------------------------------------

@dataclass
class CutoffResult:
    space: HilbertSpace
    liouvillian: Liouvillian
    steady: np.ndarray
    tail: float
    history: list = field(default_factory=list)   # (cutoff, tail) per attempt


def converged_cutoff(params: SystemParams, start: int | None = None, growth: float = 1.25,
                     limit: float = 1e-6, max_cutoff: int = 400,
                     memory_budget: int = DEFAULT_MEMORY_BUDGET) -> CutoffResult:
    """Grow the Fock cutoff from ``start`` (default: the mean-field rule) until the steady
    state puts less than ``limit`` of its population in the top tenth of the levels."""
    N = start or auto_cutoff(params)
    history = []
    while True:
        space = HilbertSpace(N)
        L = build(params, space, memory_budget=memory_budget)
        rho = steady_state(L)
        tail = tail_population(rho, space)
        history.append((N, tail))
        log.info("cutoff %d: tail population %.3e", N, tail)
        if tail < limit:
            return CutoffResult(space, L, rho, tail, history)
        nxt = max(N + 1, int(math.ceil(growth * N)))
        if nxt > max_cutoff:
            raise ResourceError(f"cutoff did not converge below {max_cutoff} (tail {tail:.2e} at N={N})")
        N = nxt
