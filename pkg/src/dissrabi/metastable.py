"""Eigenstate decomposition of the steady state, similarity graph, principal components
and lifetime estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import scipy.linalg as la
from networkx.algorithms.community import greedy_modularity_communities

from . import phasespace
from .hilbert import HilbertSpace, mode_annihilation

LABELS = ("parity-breaking-1", "parity-breaking-2", "spiral", "sigmoid", "other")


@dataclass
class SteadyDecomposition:
    probabilities: np.ndarray
    eigenstates: list[np.ndarray]
    localized_clusters: list[list[int]] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return len(self.probabilities)

    def retained(self) -> np.ndarray:
        """sum_i p_i |psi_i><psi_i| over the retained states."""
        V = np.column_stack(self.eigenstates)
        return (V * self.probabilities) @ V.conj().T


def _x_full(dim: int) -> np.ndarray:
    N = dim // 2
    a = mode_annihilation(N).toarray()
    x = (a + a.conj().T) / math.sqrt(2)
    return np.kron(np.eye(2), x)


def decompose(rho: np.ndarray, rank_tolerance: float = 1e-6, degeneracy_tol: float = 1e-3,
              localize: bool = True) -> SteadyDecomposition:
    """rho = sum_i p_i |psi_i><psi_i| keeping p_i > rank_tolerance * Tr rho, descending.

    Near-degenerate clusters (relative spread below ``degeneracy_tol``) have no preferred
    eigenbasis; with ``localize`` the cluster is rotated to diagonalize x inside it, which
    turns parity cat pairs into their localized, parity-breaking halves.  Probabilities of
    rotated states are their diagonal weights <psi|rho|psi>.
    """
    rho = 0.5 * (rho + rho.conj().T)
    w, v = la.eigh(rho)
    w, v = w[::-1], v[:, ::-1]
    keep = w > rank_tolerance * np.real(np.trace(rho))
    w, v = w[keep].copy(), v[:, keep].astype(complex)
    clusters = []
    if localize and w.size > 1:
        i = 0
        while i < w.size:
            j = i + 1
            while j < w.size and (w[i] - w[j]) <= degeneracy_tol * w[i]:
                j += 1
            if j - i > 1:
                clusters.append(list(range(i, j)))
            i = j
        if clusters:
            X = _x_full(rho.shape[0])
            for cl in clusters:
                B = v[:, cl]
                xs, U = la.eigh(B.conj().T @ X @ B)
                B = B @ U[:, ::-1]
                v[:, cl] = B
                w[cl] = np.real(np.einsum("ni,nm,mi->i", B.conj(), rho, B))
    states = [v[:, i] for i in range(w.size)]
    return SteadyDecomposition(w, states, clusters)


def fidelity(P: np.ndarray, Q: np.ndarray) -> float:
    """[sum sqrt(P Q)]^2 for normalized distributions."""
    return float(np.clip(np.sum(np.sqrt(np.clip(P, 0, None) * np.clip(Q, 0, None))) ** 2, 0.0, 1.0))


def features(decomp: SteadyDecomposition, space: HilbertSpace) -> list[np.ndarray]:
    basis = phasespace.quadrature_basis(space)
    return [phasespace.eigenstate_feature(psi, basis) for psi in decomp.eigenstates]


def similarity_graph(features: list[np.ndarray], threshold: float = 0.3) -> nx.Graph:
    """Node per feature; edge weighted by fidelity wherever it exceeds ``threshold``."""
    if len(features) < 2:
        raise ValueError("need at least two features")
    G = nx.Graph()
    G.add_nodes_from(range(len(features)))
    for i in range(len(features)):
        for j in range(i + 1, len(features)):
            f = fidelity(features[i], features[j])
            if f > threshold:
                G.add_edge(i, j, weight=f)
    return G


def communities(graph: nx.Graph) -> list[list[int]]:
    """Greedy (CNM) modularity communities; deterministic, sorted by smallest member."""
    if graph.number_of_edges() == 0:
        return [[n] for n in sorted(graph.nodes)]
    comms = greedy_modularity_communities(graph, weight="weight")
    return sorted((sorted(c) for c in comms), key=lambda c: c[0])


@dataclass
class Component:
    members: list[int]
    trace: float
    mean_x: float
    mean_sz: float
    label: str = "other"


@dataclass
class ComponentSet:
    groups: list[list[int]]
    components: list[Component]
    operators: list[np.ndarray]
    notes: list[str] = field(default_factory=list)

    def labelled(self, label: str) -> list[int]:
        return [i for i, c in enumerate(self.components) if c.label == label]

    def traces(self) -> np.ndarray:
        return np.array([c.trace for c in self.components])


def _single_offcentre_peak(op: np.ndarray, N: int, halfwidth: float, n_grid: int) -> float | None:
    """x of the only dominant Q peak of a component if it sits off the origin, else None."""
    rho_b = phasespace.partial_trace_mode(op / np.trace(op).real, N)
    grid = phasespace.husimi_q(rho_b, (-halfwidth, halfwidth), (-halfwidth, halfwidth), n_grid, n_grid,
                               coverage_tol=1.0)
    peaks = phasespace.find_peaks(grid, rel_threshold=0.2)
    cell = grid.x[1] - grid.x[0]
    if len(peaks) == 1 and math.hypot(peaks[0].x, peaks[0].p) > 2 * cell:
        return peaks[0].x
    return None


def detect_components(graph: nx.Graph, decomp: SteadyDecomposition, space: HilbertSpace,
                      expected: int | None = 4, n_grid: int = 81) -> ComponentSet:
    """Partition the eigenstates by modularity and label the resulting components.

    A component whose aggregate Q function has a single dominant peak away from the origin
    is parity-breaking; the two heaviest such components with peaks on opposite sides form
    the pair (label 1 for x > 0).  Of the rest, components whose spin is mostly up
    (<sigma_z> > 0) are spiral, the others sigmoid.
    """
    groups = communities(graph)
    X = _x_full(space.dim)
    Z = np.kron(np.diag([1.0, -1.0]), np.eye(space.fock_cutoff))
    comps, ops = [], []
    for g in groups:
        V = np.column_stack([decomp.eigenstates[i] for i in g])
        p = decomp.probabilities[g]
        op = (V * p) @ V.conj().T
        tr = float(np.real(np.trace(op)))
        comps.append(Component(list(g), tr, float(np.real(np.trace(X @ op))) / tr,
                               float(np.real(np.trace(Z @ op))) / tr))
        ops.append(op)
    notes = []
    halfwidth = phasespace.auto_halfwidth(max(abs(c.mean_x) for c in comps))
    peak_x = {}
    for i in np.argsort([-c.trace for c in comps]):
        px = _single_offcentre_peak(ops[i], space.fock_cutoff, halfwidth, n_grid)
        if px is not None:
            peak_x[int(i)] = px
    pb = []
    for i, px in peak_x.items():        # insertion order = decreasing trace
        if not pb:
            pb.append(i)
        elif np.sign(px) != np.sign(peak_x[pb[0]]):
            pb.append(i)
            break
    pb.sort(key=lambda i: -peak_x[i])
    for n, i in enumerate(pb):
        comps[i].label = LABELS[n]
    for i, c in enumerate(comps):
        if i in pb:
            continue
        c.label = "spiral" if c.mean_sz > 0 else "sigmoid"
    if expected is not None and len(comps) != expected:
        notes.append(f"found {len(comps)} components, expected {expected}")
    if len(pb) < 2:
        notes.append("parity-breaking pair not identified")
    return ComponentSet(groups, comps, ops, notes)


@dataclass
class LifetimeEstimate:
    ratios: dict
    t_m: float


def lifetime_estimate(components: ComponentSet, gamma: float) -> LifetimeEstimate:
    """T_m = (Tr rho_m / Tr rho_spiral) / gamma, with rho_m one parity-breaking component.

    All spiral-labelled components are pooled into rho_spiral.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    pb = components.labelled("parity-breaking-1")
    spiral = components.labelled("spiral")
    if not pb or not spiral:
        raise ValueError("need an identified parity-breaking and spiral component")
    tr = components.traces()
    t_pb = float(tr[pb[0]])
    t_sp = float(tr[spiral].sum())
    ratios = {}
    for i, ci in enumerate(components.components):
        for j, cj in enumerate(components.components):
            if i != j:
                ratios[(i, j)] = ci.trace / cj.trace
    return LifetimeEstimate(ratios, t_pb / t_sp / gamma)


def lifetime_from_traces(t_m_trace: float, t_spiral_trace: float, gamma: float) -> float:
    return t_m_trace / t_spiral_trace / gamma
