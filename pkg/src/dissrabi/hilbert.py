"""Truncated spin-1/2 x bosonic-mode Hilbert space and the model operators.

Tensor ordering is spin (x) mode everywhere in the package: the basis index of
``|s, n>`` is ``s * N + n`` with spin index 0 = up (sigma_z = +1) and 1 = down.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

HERMITIAN_TOL = 1e-12
DENSE_LIMIT = 256

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)

UP, DOWN = 0, 1


@dataclass(frozen=True)
class SystemParams:
    """Model parameters. All rates and frequencies share the unit of ``omega0``."""

    omega0: float = 1.0
    Omega: float = 1200.0
    lam: float = 0.0
    kappa: float = 0.5
    gamma: float = 0.05

    def __post_init__(self):
        for name in ("omega0", "Omega", "lam", "kappa", "gamma"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be > 0")
        if self.Omega <= 0:
            raise ValueError("Omega must be > 0")
        for name in ("lam", "kappa", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def lambda_unit(self) -> float:
        """sqrt(omega0 * Omega / 2), the unit in which couplings are quoted."""
        return math.sqrt(self.omega0 * self.Omega / 2)

    @property
    def lambda_ratio(self) -> float:
        return self.lam / self.lambda_unit

    @classmethod
    def from_ratio(cls, lambda_ratio: float, omega0=1.0, Omega=1200.0, kappa=0.5, gamma=0.05):
        """Build parameters with ``lam = lambda_ratio * sqrt(omega0 * Omega / 2)``."""
        return cls(omega0=omega0, Omega=Omega, lam=lambda_ratio * math.sqrt(omega0 * Omega / 2),
                   kappa=kappa, gamma=gamma)

    def replace(self, **kw) -> "SystemParams":
        d = dict(omega0=self.omega0, Omega=self.Omega, lam=self.lam, kappa=self.kappa, gamma=self.gamma)
        d.update(kw)
        return SystemParams(**d)

    def as_dict(self) -> dict:
        return dict(omega0=self.omega0, Omega=self.Omega, lam=self.lam, kappa=self.kappa,
                    gamma=self.gamma, lambda_ratio=self.lambda_ratio)


@dataclass(frozen=True)
class HilbertSpace:
    fock_cutoff: int

    def __post_init__(self):
        if int(self.fock_cutoff) != self.fock_cutoff or self.fock_cutoff < 2:
            raise ValueError(f"fock_cutoff must be an integer >= 2, got {self.fock_cutoff}")

    @property
    def dim(self) -> int:
        return 2 * self.fock_cutoff

    def index(self, n: int, spin: int) -> int:
        """Basis index of |spin, n>; spin is UP (0) or DOWN (1)."""
        return spin * self.fock_cutoff + n

    def basis(self, n: int, spin: int) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        v[self.index(n, spin)] = 1.0
        return v


@dataclass(frozen=True)
class Operator:
    """Sparse operator on a :class:`HilbertSpace`. Treat as immutable."""

    space: HilbertSpace
    entries: sp.csr_matrix
    hermitian: bool = False
    name: str = field(default="", compare=False)

    def __post_init__(self):
        m = sp.csr_matrix(self.entries, dtype=complex)
        if m.shape != (self.space.dim, self.space.dim):
            raise ValueError(f"shape {m.shape} does not match space dim {self.space.dim}")
        object.__setattr__(self, "entries", m)
        if self.hermitian:
            dev = abs(m - m.conj().T).max() if m.nnz else 0.0
            if dev > HERMITIAN_TOL:
                raise ValueError(f"operator {self.name!r} flagged Hermitian but deviates by {dev:.3e}")

    def dense(self) -> np.ndarray:
        return self.entries.toarray()

    def dag(self) -> "Operator":
        return Operator(self.space, self.entries.conj().T.tocsr(), self.hermitian, self.name + "^dag")

    def __matmul__(self, other):
        if isinstance(other, Operator):
            return Operator(self.space, self.entries @ other.entries)
        return self.entries @ other

    def __add__(self, other: "Operator") -> "Operator":
        return Operator(self.space, self.entries + other.entries)

    def __sub__(self, other: "Operator") -> "Operator":
        return Operator(self.space, self.entries - other.entries)

    def expect(self, state: np.ndarray) -> complex:
        """<psi|O|psi> for a vector, Tr[O rho] for a matrix."""
        if state.ndim == 1:
            return complex(np.vdot(state, self.entries @ state))
        return complex((self.entries.multiply(state.T)).sum())


def _mode_op(space: HilbertSpace, mode: sp.spmatrix) -> sp.csr_matrix:
    return sp.kron(sp.identity(2, format="csr"), mode, format="csr")


def _spin_op(space: HilbertSpace, spin: np.ndarray) -> sp.csr_matrix:
    return sp.kron(sp.csr_matrix(spin), sp.identity(space.fock_cutoff, format="csr"), format="csr")


def mode_annihilation(n_levels: int) -> sp.csr_matrix:
    """Bare-mode ladder operator on Fock states 0..n_levels-1."""
    return sp.diags(np.sqrt(np.arange(1, n_levels)), 1, shape=(n_levels, n_levels), format="csr",
                    dtype=complex)


def annihilation(space: HilbertSpace) -> Operator:
    return Operator(space, _mode_op(space, mode_annihilation(space.fock_cutoff)), name="a")


def creation(space: HilbertSpace) -> Operator:
    return annihilation(space).dag()


def number(space: HilbertSpace) -> Operator:
    n = sp.diags(np.arange(space.fock_cutoff, dtype=float), 0, format="csr")
    return Operator(space, _mode_op(space, n), hermitian=True, name="n")


def quadratures(space: HilbertSpace) -> tuple[Operator, Operator]:
    """x = (a^dag + a)/sqrt2 and p = i(a^dag - a)/sqrt2."""
    a = mode_annihilation(space.fock_cutoff)
    ad = a.conj().T
    x = (ad + a) / math.sqrt(2)
    p = 1j * (ad - a) / math.sqrt(2)
    return (Operator(space, _mode_op(space, x), hermitian=True, name="x"),
            Operator(space, _mode_op(space, p), hermitian=True, name="p"))


def spin_ops(space: HilbertSpace) -> dict[str, Operator]:
    """Pauli and ladder operators acting on the spin factor."""
    return {
        "sx": Operator(space, _spin_op(space, SIGMA_X), hermitian=True, name="sx"),
        "sy": Operator(space, _spin_op(space, SIGMA_Y), hermitian=True, name="sy"),
        "sz": Operator(space, _spin_op(space, SIGMA_Z), hermitian=True, name="sz"),
        "sp": Operator(space, _spin_op(space, SIGMA_PLUS), name="s+"),
        "sm": Operator(space, _spin_op(space, SIGMA_MINUS), name="s-"),
    }


def hamiltonian(params: SystemParams, space: HilbertSpace) -> Operator:
    """H = w0 a^dag a + (Omega/2) sz + (lam/sqrt2)(a^dag + a) sx."""
    n = number(space).entries
    x, _ = quadratures(space)
    s = spin_ops(space)
    h = params.omega0 * n + 0.5 * params.Omega * s["sz"].entries + params.lam * (x.entries @ s["sx"].entries)
    return Operator(space, h, hermitian=True, name="H")


def parity(space: HilbertSpace) -> Operator:
    """exp(i pi (a^dag a + sz/2)), diagonal in the spin (x) Fock basis."""
    # exact entries (-1)^n (+-i) rather than exp() of a growing argument
    sign = np.where(np.arange(space.fock_cutoff) % 2 == 0, 1.0, -1.0)
    phases = np.concatenate([1j * sign, -1j * sign])
    return Operator(space, sp.diags(phases, 0, format="csr"), name="P")


def identity(space: HilbertSpace) -> Operator:
    return Operator(space, sp.identity(space.dim, dtype=complex, format="csr"), hermitian=True, name="1")


# --- cutoff selection ------------------------------------------------------

def meanfield_displacement(params: SystemParams) -> float:
    """|<x>| of the parity-breaking mean-field solution, 0 below the critical coupling."""
    lc2 = (params.omega0 * params.Omega / 2) * (1 + params.gamma ** 2 / params.Omega ** 2) \
        * (1 + params.kappa ** 2 / params.omega0 ** 2)
    if params.lam ** 2 <= lc2:
        return 0.0
    r = lc2 / params.lam ** 2
    sx = math.sqrt(2 / (1 + params.gamma ** 2 / params.Omega ** 2) * r * (1 - r))
    return params.lam / params.omega0 * sx / (1 + params.kappa ** 2 / params.omega0 ** 2)


def auto_cutoff(params: SystemParams) -> int:
    """Fock cutoff ceil(8 + 3 xbar^2 / 2) from the mean-field displacement."""
    xbar = meanfield_displacement(params)
    return int(math.ceil(8 + 1.5 * xbar ** 2))


def tail_population(state: np.ndarray, space: HilbertSpace, fraction: float = 0.1) -> float:
    """Population in the top ``fraction`` of Fock levels (at least one level)."""
    N = space.fock_cutoff
    k = max(1, int(math.ceil(fraction * N)))
    if state.ndim == 1:
        probs = np.abs(state) ** 2
    else:
        probs = np.real(np.diag(state))
    probs = probs.reshape(2, N).sum(axis=0)
    return float(probs[N - k:].sum())


def tail_ok(state: np.ndarray, space: HilbertSpace, limit: float = 1e-6) -> bool:
    return tail_population(state, space) < limit
