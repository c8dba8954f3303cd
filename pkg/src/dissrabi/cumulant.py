"""Moment equations of motion, moment <-> cumulant conversion and truncated cumulant
hierarchies for one bosonic mode coupled to one spin-1/2.

Operator algebra is done on Weyl symbols: a mode monomial ``x^a p^b`` stands for the
fully symmetrized (Weyl-ordered) operator, and products follow the Moyal star product
with [x, p] = i.  The expectation of a symmetrized word is exactly the moment generated
by <exp(sum_l eta_l o_l)>, so the set-partition cumulant formulas apply directly.
A spin factor is one of 1, sx, sy, sz; products of Pauli letters are always reduced,
so a word or cumulant symbol carries at most one spin letter.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import SolverError
from .hilbert import SystemParams

SPIN_NAMES = ("", "sx", "sy", "sz")
PARAM_NAMES = ("omega0", "Omega", "lam", "kappa", "gamma")
MIN_ORDER, MAX_ORDER = 1, 6


class Word(NamedTuple):
    """Weyl-symmetrized x^nx p^np times a spin letter (0 = none, 1..3 = sx, sy, sz)."""

    nx: int
    np: int
    spin: int = 0

    @property
    def order(self) -> int:
        return self.nx + self.np + (1 if self.spin else 0)

    def letters(self) -> list[str]:
        out = ["x"] * self.nx + ["p"] * self.np
        if self.spin:
            out.append(SPIN_NAMES[self.spin])
        return out

    @property
    def name(self) -> str:
        return ",".join(self.letters())

    @classmethod
    def parse(cls, text: str) -> "Word":
        letters = [t.strip() for t in text.replace(" ", ",").split(",") if t.strip()]
        nx = letters.count("x")
        np_ = letters.count("p")
        spins = [SPIN_NAMES.index(t) for t in letters if t in SPIN_NAMES[1:]]
        if nx + np_ + len(spins) != len(letters) or len(spins) > 1:
            raise ValueError(f"cannot parse word {text!r}")
        return cls(nx, np_, spins[0] if spins else 0)


ONE = Word(0, 0, 0)


def moment_name(w: Word) -> str:
    return f"<{w.name}>" if w != ONE else "1"


def cumulant_name(w: Word) -> str:
    return f"c[{w.name}]"


def words_up_to(order: int, min_order: int = 1) -> list[Word]:
    """All canonical words with min_order <= order(w) <= order, graded then lexicographic."""
    out = []
    for n in range(min_order, order + 1):
        for nx in range(n, -1, -1):
            out.append(Word(nx, n - nx, 0))
        for spin in (1, 2, 3):
            for nx in range(n - 1, -1, -1):
                out.append(Word(nx, n - 1 - nx, spin))
    return out


# --- Weyl-symbol operator algebra ------------------------------------------------

Op = dict  # Word -> complex


def _add(*ops: Op, scale=None) -> Op:
    out: dict = defaultdict(complex)
    for k, op in enumerate(ops):
        s = 1.0 if scale is None else scale[k]
        for w, c in op.items():
            out[w] += s * c
    return {w: c for w, c in out.items() if abs(c) > 1e-14}


def _falling(n: int, k: int) -> int:
    return math.perm(n, k) if k <= n else 0


@lru_cache(maxsize=None)
def _moyal(a: int, b: int, c: int, d: int) -> tuple:
    """x^a p^b * x^c p^d (Moyal, hbar = 1) as ((i, j, coeff), ...)."""
    out: dict = defaultdict(complex)
    for n in range(0, a + b + c + d + 1):
        pref = (0.5j) ** n / math.factorial(n)
        for k in range(n + 1):
            # d_x^{n-k} d_p^k on the left, d_p^{n-k} d_x^k on the right
            cl = _falling(a, n - k) * _falling(b, k)
            cr = _falling(d, n - k) * _falling(c, k)
            if cl == 0 or cr == 0:
                continue
            out[(a - (n - k) + c - k, b - k + d - (n - k))] += pref * math.comb(n, k) * (-1) ** k * cl * cr
    return tuple((i, j, v) for (i, j), v in out.items() if v != 0)


# sigma_s sigma_t = coeff * sigma_u
_PAULI = {}
for _s in range(4):
    for _t in range(4):
        if _s == 0:
            _PAULI[_s, _t] = (1.0, _t)
        elif _t == 0:
            _PAULI[_s, _t] = (1.0, _s)
        elif _s == _t:
            _PAULI[_s, _t] = (1.0, 0)
        else:
            _u = 6 - _s - _t
            _eps = 1 if (_s, _t) in ((1, 2), (2, 3), (3, 1)) else -1
            _PAULI[_s, _t] = (1j * _eps, _u)


def mul(A: Op, B: Op) -> Op:
    out: dict = defaultdict(complex)
    for wa, ca in A.items():
        for wb, cb in B.items():
            ps, u = _PAULI[wa.spin, wb.spin]
            for i, j, v in _moyal(wa.nx, wa.np, wb.nx, wb.np):
                out[Word(i, j, u)] += ca * cb * ps * v
    return {w: c for w, c in out.items() if abs(c) > 1e-14}


def commutator(A: Op, B: Op) -> Op:
    return _add(mul(A, B), mul(B, A), scale=(1.0, -1.0))


_SQ2 = math.sqrt(2)
A_OP = {Word(1, 0): 1 / _SQ2, Word(0, 1): 1j / _SQ2}          # a = (x + i p)/sqrt2
AD_OP = {Word(1, 0): 1 / _SQ2, Word(0, 1): -1j / _SQ2}        # a^dag
SP_OP = {Word(0, 0, 1): 0.5, Word(0, 0, 2): 0.5j}             # sigma_+
SM_OP = {Word(0, 0, 1): 0.5, Word(0, 0, 2): -0.5j}            # sigma_-


def hamiltonian_parts() -> dict[str, Op]:
    """H = omega0 * H[omega0] + Omega * H[Omega] + lam * H[lam]."""
    return {
        "omega0": mul(AD_OP, A_OP),
        "Omega": {Word(0, 0, 3): 0.5},
        "lam": {Word(1, 0, 1): 1.0},
    }


def adjoint_dissipator(c: Op, O: Op) -> Op:
    """2 c^dag O c - c^dag c O - O c^dag c (unit rate)."""
    cd = {w: np.conj(v) for w, v in c.items()}
    cdc = mul(cd, c)
    return _add(mul(mul(cd, O), c), mul(cdc, O), mul(O, cdc), scale=(2.0, -1.0, -1.0))


@dataclass(frozen=True)
class MomentEOM:
    """d<word>/dt as a sum over parameters of linear forms in moments."""

    word: Word
    parts: dict  # param name -> {Word: real coeff}

    def evaluate(self, params: SystemParams) -> dict:
        vals = {"omega0": params.omega0, "Omega": params.Omega, "lam": params.lam,
                "kappa": params.kappa, "gamma": params.gamma}
        out: dict = defaultdict(float)
        for name, form in self.parts.items():
            for w, c in form.items():
                out[w] += vals[name] * c
        return {w: c for w, c in out.items() if c != 0}

    def max_order(self) -> int:
        return max((w.order for form in self.parts.values() for w in form), default=0)

    def pretty(self) -> str:
        terms = []
        for name in PARAM_NAMES:
            for w, c in sorted(self.parts.get(name, {}).items()):
                terms.append(f"{c:+.12g}*{name}*{moment_name(w)}")
        return f"d{moment_name(self.word)}/dt = " + " ".join(terms)


@lru_cache(maxsize=None)
def _eom_parts(word: Word) -> tuple:
    O = {word: 1.0}
    parts = {}
    for name, Hp in hamiltonian_parts().items():
        parts[name] = {w: 1j * c for w, c in commutator(Hp, O).items()}
    parts["kappa"] = adjoint_dissipator(A_OP, O)
    parts["gamma"] = adjoint_dissipator(SM_OP, O)
    out = []
    for name in PARAM_NAMES:
        form = {}
        for w, c in parts[name].items():
            if abs(c.imag) > 1e-12:
                raise AssertionError(f"non-real coefficient {c} in EOM of {word}")
            if abs(c.real) > 1e-14:
                form[w] = float(c.real)
        out.append((name, tuple(sorted(form.items()))))
    return tuple(out)


def moment_eom_symbolic(word: Word) -> MomentEOM:
    if word.order < 1:
        raise ValueError("word must have order >= 1")
    return MomentEOM(word, {name: dict(form) for name, form in _eom_parts(word) if form})


def moment_eom(params: SystemParams, word: Word) -> dict:
    """Right-hand side of d<word>/dt as {Word: coefficient}; Word(0,0,0) is the constant 1."""
    return moment_eom_symbolic(word).evaluate(params)


# --- moment <-> cumulant ------------------------------------------------------

Poly = dict  # tuple[Word, ...] (sorted) -> float


def _set_partitions(n: int):
    """Set partitions of range(n) as lists of blocks (restricted growth strings)."""
    if n == 0:
        yield []
        return
    a = [0] * n

    def rec(i, m):
        if i == n:
            blocks = [[] for _ in range(m)]
            for k, b in enumerate(a):
                blocks[b].append(k)
            yield blocks
            return
        for b in range(m + 1):
            a[i] = b
            yield from rec(i + 1, max(m, b + 1))

    yield from rec(1 if n else 0, 1)


def _block_word(letters: tuple, block) -> Word:
    nx = sum(1 for k in block if letters[k] == "x")
    np_ = sum(1 for k in block if letters[k] == "p")
    spins = [SPIN_NAMES.index(letters[k]) for k in block if letters[k] not in ("x", "p")]
    return Word(nx, np_, spins[0] if spins else 0)


@lru_cache(maxsize=None)
def _partition_table(word: Word) -> tuple:
    """((blocks as sorted Word tuple, number of set partitions), ...) for the word's letters."""
    letters = tuple(word.letters())
    counts: dict = defaultdict(int)
    for blocks in _set_partitions(len(letters)):
        key = tuple(sorted(_block_word(letters, b) for b in blocks))
        counts[key] += 1
    return tuple(counts.items())


def moment_to_cumulant(word: Word) -> Poly:
    """<word> = sum over set partitions of products of cumulants."""
    if word == ONE:
        return {(): 1.0}
    return {k: float(v) for k, v in _partition_table(word)}


def cumulant_to_moment(word: Word) -> Poly:
    """c[word] = sum_pi (-1)^(|pi|-1) (|pi|-1)! prod_B <B>."""
    out: dict = defaultdict(float)
    for key, cnt in _partition_table(word):
        k = len(key)
        out[key] += cnt * (-1) ** (k - 1) * math.factorial(k - 1)
    return {k: v for k, v in out.items() if v != 0}


def poly_mul(A: Poly, B: Poly) -> Poly:
    out: dict = defaultdict(float)
    for ka, va in A.items():
        for kb, vb in B.items():
            out[tuple(sorted(ka + kb))] += va * vb
    return dict(out)


def poly_add(A: Poly, B: Poly, scale: float = 1.0) -> Poly:
    out = dict(A)
    for k, v in B.items():
        out[k] = out.get(k, 0.0) + scale * v
    return out


def poly_clean(A: Poly, tol: float = 1e-12) -> Poly:
    return {k: v for k, v in A.items() if abs(v) > tol}


def substitute(P: Poly, table) -> Poly:
    """Replace every symbol w in P by the polynomial table(w)."""
    out: Poly = {}
    for key, v in P.items():
        term: Poly = {(): v}
        for w in key:
            term = poly_mul(term, table(w))
        out = poly_add(out, term)
    return poly_clean(out)


def round_trip(word: Word) -> Poly:
    """cumulant -> moments -> cumulants; the identity map gives {(word,): 1}."""
    return substitute(cumulant_to_moment(word), moment_to_cumulant)


def evaluate_poly(P: Poly, values: dict) -> float:
    total = 0.0
    for key, v in P.items():
        t = v
        for w in key:
            t *= 1.0 if w == ONE else values[w]
        total += t
    return total


# --- truncated hierarchy -----------------------------------------------------------

@dataclass
class CumulantSystem:
    """Closed steady-state equations: for every word w of order <= n, the right-hand side of
    d<w>/dt written in cumulants of order <= n (order n+1 cumulants set to zero)."""

    order: int
    unknowns: list[Word]
    equations: list[Poly]
    params: SystemParams
    _compiled: tuple | None = field(default=None, repr=False)

    def index(self) -> dict:
        return {w: i for i, w in enumerate(self.unknowns)}

    def symbols_in_equations(self) -> set:
        return {w for eq in self.equations for key in eq for w in key}

    def is_closed(self) -> bool:
        return self.symbols_in_equations() <= set(self.unknowns) and len(self.equations) == len(self.unknowns)

    def _compile(self):
        if self._compiled is None:
            idx = self.index()
            n = len(self.unknowns)
            width = max((len(k) for eq in self.equations for k in eq), default=1) or 1
            rows, coefs, mons = [], [], []
            for r, eq in enumerate(self.equations):
                for key, v in eq.items():
                    m = [idx[w] for w in key] + [n] * (width - len(key))
                    rows.append(r)
                    coefs.append(v)
                    mons.append(m)
            self._compiled = (np.array(rows), np.array(coefs), np.array(mons, dtype=int).reshape(-1, width), n)
        return self._compiled

    def residual(self, values: np.ndarray) -> np.ndarray:
        rows, coefs, mons, n = self._compile()
        ext = np.append(values, 1.0)
        terms = coefs * np.prod(ext[mons], axis=1)
        return np.bincount(rows, weights=terms, minlength=len(self.equations))

    def jacobian(self, values: np.ndarray) -> np.ndarray:
        rows, coefs, mons, n = self._compile()
        ext = np.append(values, 1.0)
        f = ext[mons]                                   # T x width
        width = f.shape[1]
        left = np.ones_like(f)
        right = np.ones_like(f)
        for k in range(1, width):
            left[:, k] = left[:, k - 1] * f[:, k - 1]
            right[:, width - 1 - k] = right[:, width - k] * f[:, width - k]
        J = np.zeros((len(self.equations), n + 1))
        for k in range(width):
            np.add.at(J, (rows, mons[:, k]), coefs * left[:, k] * right[:, k])
        return J[:, :n]

    def to_text(self, fmt: str = "{:+.12g}") -> str:
        """One line per equation: ``d<w>/dt = sum coeff * c[..]*c[..]``."""
        lines = []
        for w, eq in zip(self.unknowns, self.equations):
            terms = []
            for key in sorted(eq, key=lambda k: (len(k), k)):
                mono = "*".join(cumulant_name(s) for s in key) or "1"
                terms.append(f"{fmt.format(eq[key])}*{mono}")
            lines.append(f"d{moment_name(w)}/dt = " + (" ".join(terms) if terms else "0"))
        return "\n".join(lines) + "\n"


def truncated_moment(word: Word, order: int) -> Poly:
    """Moment in cumulants with every cumulant above ``order`` dropped."""
    return {k: v for k, v in moment_to_cumulant(word).items() if all(w.order <= order for w in k)}


def build_system(params: SystemParams, n: int) -> CumulantSystem:
    if not MIN_ORDER <= n <= MAX_ORDER:
        raise ValueError(f"truncation order must be in [{MIN_ORDER}, {MAX_ORDER}], got {n}")
    unknowns = words_up_to(n)
    equations = []
    for w in unknowns:
        eq: Poly = {}
        for u, c in moment_eom(params, w).items():
            eq = poly_add(eq, truncated_moment(u, n), c)
        equations.append(poly_clean(eq, 1e-13))
    return CumulantSystem(n, unknowns, equations, params)


# --- steady state ------------------------------------------------------------------

@dataclass
class CumulantSolution:
    values: dict
    residual: float
    iterations: int
    history: list[float]
    converged: bool

    def x_cumulants(self, order: int | None = None) -> np.ndarray:
        """[<x>_c, <x^2>_c, ..., <x^n>_c]"""
        n = order or max(w.order for w in self.values)
        return np.array([self.values[Word(k, 0, 0)] for k in range(1, n + 1)])


def seed_vector(system: CumulantSystem, mf_state) -> np.ndarray:
    """Mean-field first-order cumulants, all fluctuation cumulants zero."""
    x0 = np.zeros(len(system.unknowns))
    first = {Word(1, 0): mf_state[0], Word(0, 1): mf_state[1], Word(0, 0, 1): mf_state[2],
             Word(0, 0, 2): mf_state[3], Word(0, 0, 3): mf_state[4]}
    for i, w in enumerate(system.unknowns):
        x0[i] = first.get(w, 0.0)
    return x0


def steady_solve(system: CumulantSystem, seed, tol: float = 1e-10, maxiter: int = 100,
                 raise_on_failure: bool = True) -> CumulantSolution:
    """Damped Newton iteration on the truncated steady-state equations.

    ``seed`` is a 5-vector (x, p, sx, sy, sz) or a full initial vector.
    """
    seed = np.asarray(seed, dtype=float)
    x = seed_vector(system, seed) if seed.size == 5 and len(system.unknowns) != 5 else seed.copy()
    F = system.residual(x)
    hist = [float(np.abs(F).max())]
    it = 0
    for it in range(1, maxiter + 1):
        if hist[-1] < tol:
            break
        J = system.jacobian(x)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -F, rcond=None)[0]
        t = 1.0
        f0 = np.linalg.norm(F)
        while t > 1e-6:
            xn = x + t * dx
            Fn = system.residual(xn)
            if np.all(np.isfinite(Fn)) and np.linalg.norm(Fn) < (1 - 1e-4 * t) * f0:
                break
            t *= 0.5
        else:
            xn = x + t * dx
            Fn = system.residual(xn)
        x, F = xn, Fn
        hist.append(float(np.abs(F).max()))
        if not np.isfinite(hist[-1]):
            break
    converged = hist[-1] < tol
    sol = CumulantSolution({w: float(v) for w, v in zip(system.unknowns, x)}, hist[-1], it, hist, converged)
    if not converged and raise_on_failure:
        raise SolverError(f"Newton iteration did not converge (residual {hist[-1]:.3e})",
                          {"residuals": hist, "solution": sol})
    return sol


def parity_image(w: Word) -> int:
    """Sign picked up by <w> under (x, p, sx, sy) -> -(x, p, sx, sy)."""
    flips = w.nx + w.np + (1 if w.spin in (1, 2) else 0)
    return -1 if flips % 2 else 1
