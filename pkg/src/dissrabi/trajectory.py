"""Quantum-jump unraveling of the master equation, ensemble averages and Q-peak paths.

Each step draws one uniform number u.  With P_k = 2 kappa dt <a^dag a> and
P_g = 2 gamma dt <s+ s->, the state jumps by a (u < P_k), by s- (u < P_k + P_g), or
else evolves under the non-Hermitian H_eff = H - i kappa a^dag a - i gamma s+ s- and is
renormalized.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import phasespace
from .errors import StepSizeError
from .hilbert import (HilbertSpace, SystemParams, annihilation, hamiltonian, meanfield_displacement,
                      quadratures, spin_ops)

MODE, SPIN = "mode", "spin"
DENSE_PROPAGATOR_LIMIT = 2500
_BLOCK = 4096   # uniforms drawn per trajectory per refill


def default_dt(params: SystemParams, n_est: float | None = None) -> float:
    """min(0.02/w0, 0.05/(2 kappa n_est)), n_est from the mean-field displacement by default."""
    if n_est is None:
        n_est = 0.5 * meanfield_displacement(params) ** 2 + 0.5
    dt = 0.02 / params.omega0
    if params.kappa > 0 and n_est > 0:
        dt = min(dt, 0.05 / (2 * params.kappa * n_est))
    return dt


@dataclass(frozen=True)
class TrajectoryConfig:
    dt: float
    t_max: float
    seed: int = 0
    record_stride: int = 1
    observables: tuple = ("sz", "x", "dx")
    keep_states: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.t_max >= 0:
            raise ValueError("t_max must be >= 0")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        unknown = set(self.observables) - {"sz", "x", "dx"}
        if unknown:
            raise ValueError(f"unknown observables {sorted(unknown)}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    def record_times(self) -> np.ndarray:
        idx = np.arange(0, self.n_steps + 1, self.record_stride)
        return idx * self.dt

    def validate(self, params: SystemParams, model: "JumpModel", psi0: np.ndarray,
                 limit: float = 0.1) -> float:
        """Largest expected per-step jump probability (initial state or mean-field estimate)."""
        n0 = float(np.real(np.vdot(psi0, model.n_op @ psi0)))
        e0 = float(np.real(np.vdot(psi0, model.spsm @ psi0)))
        n_mf = 0.5 * meanfield_displacement(params) ** 2
        p = 2 * self.dt * (params.kappa * max(n0, n_mf) + params.gamma * max(e0, 1.0))
        if p >= limit:
            raise StepSizeError(f"dt={self.dt} gives jump probability {p:.3f} per step (limit {limit})")
        return p


class JumpModel:
    """Operators and the no-jump propagator for a fixed (params, space, dt)."""

    def __init__(self, params: SystemParams, space: HilbertSpace, dt: float, scheme: str = "split"):
        self.params, self.space, self.dt = params, space, dt
        s = spin_ops(space)
        self.a = annihilation(space).entries
        self.sm = s["sm"].entries
        self.n_op = (self.a.conj().T @ self.a).tocsr()
        self.spsm = (s["sp"].entries @ self.sm).tocsr()
        self.sz = s["sz"].entries
        x, _ = quadratures(space)
        self.x = x.entries
        self.x2 = (self.x @ self.x).tocsr()
        H = hamiltonian(params, space).entries
        self.h_eff = (H - 1j * params.kappa * self.n_op - 1j * params.gamma * self.spsm).tocsr()
        if scheme not in ("split", "euler"):
            raise ValueError("scheme must be 'split' or 'euler'")
        self.scheme = scheme
        # split: half drift, jump decision, half drift; euler: decision then a full drift
        self.tau = 0.5 * dt if scheme == "split" else dt
        if space.dim <= DENSE_PROPAGATOR_LIMIT:
            self._U = la.expm(-1j * self.tau * self.h_eff.toarray())
        else:
            self._U = None

    def drift(self, psi: np.ndarray) -> np.ndarray:
        """exp(-i H_eff tau) psi, unnormalized; second-order Taylor for large spaces."""
        if self._U is not None:
            return self._U @ psi
        k1 = -1j * self.tau * (self.h_eff @ psi)
        return psi + k1 + 0.5 * (-1j * self.tau) * (self.h_eff @ k1)

    def probabilities(self, psi: np.ndarray) -> tuple:
        """(P_mode, P_spin) for a normalized state or a column batch."""
        pk = 2 * self.params.kappa * self.dt * _expect(self.n_op, psi)
        pg = 2 * self.params.gamma * self.dt * _expect(self.spsm, psi)
        return pk, pg


def _expect(op: sp.spmatrix, psi: np.ndarray):
    v = np.real(np.sum(psi.conj() * (op @ psi), axis=0))
    return v


def _normalize(psi: np.ndarray) -> np.ndarray:
    return psi / np.linalg.norm(psi, axis=0)


def step(psi: np.ndarray, model: JumpModel, rng) -> tuple:
    """One update of a normalized state; returns (new state, MODE | SPIN | None)."""
    if abs(np.linalg.norm(psi) - 1) > 1e-8:
        raise ValueError("state must be normalized")
    u = rng.random() if hasattr(rng, "random") else float(rng)
    return _step_with(psi, model, u)


def _step_with(psi, model, u):
    new, mode, spin = _advance(model, psi.reshape(-1, 1), np.atleast_1d(u))
    event = MODE if mode[0] else SPIN if spin[0] else None
    return new[:, 0], event


def _advance(model: JumpModel, psi: np.ndarray, u: np.ndarray):
    """Batched step; columns of psi are normalized states, u one uniform per column."""
    if model.scheme == "split":
        psi = _normalize(model.drift(psi))
    pk, pg = model.probabilities(psi)
    if np.any(pk + pg >= 1):
        raise StepSizeError(f"P_mode + P_spin = {np.max(pk + pg):.3f} >= 1; reduce dt")
    mode = u < pk
    spin = ~mode & (u < pk + pg)
    if model.scheme == "split":
        new = psi.copy()
    else:
        new = model.drift(psi)
    if mode.any():
        new[:, mode] = model.a @ psi[:, mode]
    if spin.any():
        new[:, spin] = model.sm @ psi[:, spin]
    if model.scheme == "split":
        new = model.drift(new)
    return _normalize(new), mode, spin


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    sz: np.ndarray
    x: np.ndarray
    dx: np.ndarray
    norms: np.ndarray
    jump_log: list = field(default_factory=list)    # (t, channel)
    states: np.ndarray | None = None                # (n_records, dim) if kept
    peak_path: list = field(default_factory=list)

    def series(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "sz", "x", "dx"])
            for row in zip(self.times, self.sz, self.x, self.dx):
                w.writerow([repr(float(v)) for v in row])

    def jump_log_json(self) -> str:
        return json.dumps([{"t": float(t), "channel": c} for t, c in self.jump_log])


def _observe(model: JumpModel, psi: np.ndarray):
    x = _expect(model.x, psi)
    x2 = _expect(model.x2, psi)
    return (_expect(model.sz, psi), x, np.sqrt(np.clip(x2 - x ** 2, 0.0, None)),
            np.linalg.norm(psi, axis=0))


def _evolve_batch(model: JumpModel, psi0: np.ndarray, config: TrajectoryConfig,
                  rngs: list) -> list[TrajectoryRecord]:
    """Advance len(rngs) trajectories together; trajectory j only consumes rngs[j]."""
    n_traj = len(rngs)
    psi = np.repeat(psi0.reshape(-1, 1).astype(complex), n_traj, axis=1)
    n_steps, stride = config.n_steps, config.record_stride
    n_rec = n_steps // stride + 1
    obs = np.zeros((4, n_rec, n_traj))
    states = np.zeros((n_rec, model.space.dim, n_traj), complex) if config.keep_states else None
    logs = [[] for _ in range(n_traj)]
    U = np.empty((n_traj, 0))
    r = 0
    for k in range(n_steps + 1):
        if k % stride == 0:
            obs[:, r] = _observe(model, psi)
            if states is not None:
                states[r] = psi
            r += 1
        if k == n_steps:
            break
        if k % _BLOCK == 0:
            m = min(_BLOCK, n_steps - k)
            U = np.stack([g.random(m) for g in rngs])
        u = U[:, k % _BLOCK]
        try:
            psi, mode, spin = _advance(model, psi, u)
        except StepSizeError as exc:
            raise StepSizeError(f"{exc} (t={k * model.dt:.4g})") from None
        for j in np.nonzero(mode | spin)[0]:
            logs[j].append(((k + 1) * model.dt, MODE if mode[j] else SPIN))
    times = np.arange(n_rec) * stride * model.dt
    out = []
    for j in range(n_traj):
        out.append(TrajectoryRecord(times, obs[0, :, j], obs[1, :, j], obs[2, :, j], obs[3, :, j], logs[j],
                                    None if states is None else states[:, :, j].copy()))
    return out


def _check_initial(psi0: np.ndarray, space: HilbertSpace) -> np.ndarray:
    psi0 = np.asarray(psi0, dtype=complex).ravel()
    if psi0.size != space.dim:
        raise ValueError(f"initial state has size {psi0.size}, expected {space.dim}")
    if abs(np.linalg.norm(psi0) - 1) > 1e-10:
        raise ValueError("initial state must be normalized")
    return psi0


def run(config: TrajectoryConfig, psi0: np.ndarray, params: SystemParams, space: HilbertSpace,
        model: JumpModel | None = None) -> TrajectoryRecord:
    """A single trajectory driven by the stream seeded with ``config.seed``."""
    psi0 = _check_initial(psi0, space)
    model = model or JumpModel(params, space, config.dt)
    config.validate(params, model, psi0)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    return _evolve_batch(model, psi0, config, [rng])[0]


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean: dict
    stderr: dict
    n_trajectories: int
    records: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        names = sorted(self.mean)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{n}_{s}" for n in names for s in ("mean", "stderr")])
            for i, t in enumerate(self.times):
                row = [repr(float(t))]
                for n in names:
                    row += [repr(float(self.mean[n][i])), repr(float(self.stderr[n][i]))]
                w.writerow(row)


def ensemble(config: TrajectoryConfig, psi0: np.ndarray, params: SystemParams, space: HilbertSpace,
             n_trajectories: int, threads: int = 1, batch: int = 250,
             keep_records: bool = False) -> EnsembleResult:
    """Average of independent trajectories; trajectory j uses child j of SeedSequence(seed).

    Results do not depend on ``threads`` or ``batch``.
    """
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    psi0 = _check_initial(psi0, space)
    model = JumpModel(params, space, config.dt)
    config.validate(params, model, psi0)
    children = np.random.SeedSequence(config.seed).spawn(n_trajectories)
    chunks = [children[i:i + batch] for i in range(0, n_trajectories, batch)]

    def work(chunk):
        return _evolve_batch(model, psi0, config, [np.random.default_rng(c) for c in chunk])

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    records = [r for part in parts for r in part]
    mean, stderr = {}, {}
    for name in ("sz", "x", "dx"):
        data = np.array([r.series(name) for r in records])
        mean[name] = data.mean(axis=0)
        stderr[name] = data.std(axis=0, ddof=1) / math.sqrt(n_trajectories) if n_trajectories > 1 \
            else np.zeros(data.shape[1])
    return EnsembleResult(records[0].times, mean, stderr, n_trajectories, records if keep_records else [])


# --- Q-peak paths ------------------------------------------------------------

@dataclass
class Branch:
    points: list                 # (t, x, p)
    parent: int | None = None    # branch this one split from
    active: bool = True


def peak_path(record: TrajectoryRecord, space: HilbertSpace, x_range=(-8.0, 8.0), p_range=None,
              n_grid: int = 81, rel_threshold: float = 0.2) -> list[Branch]:
    """Track the Q-function peaks of the recorded mode states over time.

    Peaks are linked to the nearest existing branch; when the peak count grows, the extra
    peaks open new branches whose parent is their nearest branch, and branches without a
    peak are closed.
    """
    if record.states is None:
        raise ValueError("trajectory was run without keep_states")
    branches: list[Branch] = []
    for t, psi in zip(record.times, record.states):
        v = psi.reshape(2, space.fock_cutoff)
        rho_b = v.T @ v.conj()
        grid = phasespace.husimi_q(rho_b, x_range, p_range, n_grid, n_grid, coverage_tol=1.0)
        peaks = phasespace.find_peaks(grid, rel_threshold)
        pts = [(pk.x, pk.p) for pk in peaks]
        live = [i for i, b in enumerate(branches) if b.active]
        pairs = sorted(((math.dist(branches[i].points[-1][1:], q), i, j)
                        for i in live for j, q in enumerate(pts)))
        used_b, used_p = set(), set()
        for _, i, j in pairs:
            if i in used_b or j in used_p:
                continue
            branches[i].points.append((float(t), *pts[j]))
            used_b.add(i)
            used_p.add(j)
        for j, q in enumerate(pts):
            if j in used_p:
                continue
            parent = None
            if live:
                parent = min(live, key=lambda i: math.dist(branches[i].points[-1][1:], q))
            branches.append(Branch([(float(t), *q)], parent))
        for i in live:
            if i not in used_b:
                branches[i].active = False
    record.peak_path = branches
    return branches
