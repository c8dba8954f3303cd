import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_density, random_state
from dissrabi import hilbert as H
from dissrabi import phasespace as PS
from dissrabi.hilbert import DOWN, UP, HilbertSpace


def fock_projector(N, n=0):
    r = np.zeros((N, N), complex)
    r[n, n] = 1
    return r


class TestPartialTrace:
    def test_ground_state(self):
        s = HilbertSpace(6)
        v = s.basis(0, DOWN)
        rb = PS.partial_trace_mode(np.outer(v, v.conj()))
        assert np.allclose(rb, fock_projector(6))

    def test_product_state(self, rng):
        rs = random_density(2, rng)
        rm = random_density(7, rng)
        rb = PS.partial_trace_mode(np.kron(rs, rm))
        assert np.max(np.abs(rb - rm)) < 1e-14
        assert np.max(np.abs(PS.partial_trace_spin(np.kron(rs, rm)) - rs)) < 1e-14

    def test_quadrature_expectation(self, rng):
        s = HilbertSpace(9)
        rho = random_density(s.dim, rng)
        x_full = H.quadratures(s)[0].dense()
        a = H.mode_annihilation(9).toarray()
        x_mode = (a + a.T) / math.sqrt(2)
        rb = PS.partial_trace_mode(rho)
        assert abs(np.trace(rb @ x_mode) - np.trace(rho @ x_full)) < 1e-12
        assert abs(np.trace(rb) - 1) < 1e-12
        assert np.max(np.abs(rb - rb.conj().T)) < 1e-14


class TestHusimi:
    def test_vacuum_closed_form(self):
        g = PS.husimi_q(fock_projector(40), (-4, 4), nx=41, np_=41)
        X, P = np.meshgrid(g.x, g.p, indexing="ij")
        ref = np.exp(-(X ** 2 + P ** 2) / 2) / math.pi
        assert np.max(np.abs(g.values - ref)) < 1e-10
        assert g.total() == pytest.approx(1.0, abs=1e-3)

    def test_coherent_peak(self):
        beta = (1.5 - 2.0j)
        v = PS.coherent_state(beta, HilbertSpace(40))
        g = PS.husimi_q(np.outer(v, v.conj()), (-8, 8), nx=161, np_=161)
        pk = PS.find_peaks(g)
        assert len(pk) == 1
        dx = g.x[1] - g.x[0]
        assert abs(pk[0].x - math.sqrt(2) * beta.real) <= dx
        assert abs(pk[0].p - math.sqrt(2) * beta.imag) <= dx

    def test_coverage_warning(self):
        v = PS.coherent_state(3.0, HilbertSpace(40))
        with pytest.warns(RuntimeWarning, match="too small"):
            g = PS.husimi_q(np.outer(v, v.conj()), (-2, 2), nx=21, np_=21)
        assert g.warnings

    def test_no_warning_when_covered(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            g = PS.husimi_q(fock_projector(20), (-7, 7), nx=51, np_=51)
        assert not g.warnings

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rho = random_density(12, np.random.default_rng(seed))
        g = PS.husimi_q(rho, (-9, 9), nx=31, np_=31)
        assert g.values.min() >= -1e-15

    def test_parity_symmetric_state(self, rng):
        # a state commuting with (-1)^n has Q(-alpha) = Q(alpha)
        N = 15
        rho = random_density(N, rng)
        mask = (np.add.outer(np.arange(N), np.arange(N)) % 2) == 0
        rho = rho * mask
        g = PS.husimi_q(rho, (-9, 9), nx=41, np_=41)
        assert np.max(np.abs(g.values - g.values[::-1, ::-1])) < 1e-8

    def test_smp_steady_state_two_symmetric_peaks(self, smp50):
        rb = PS.partial_trace_mode(smp50.steady)
        xbar = H.meanfield_displacement(smp50.liouvillian.params)
        g = PS.husimi_q(rb, nx=121, np_=121, xbar=xbar)
        pk = PS.find_peaks(g, rel_threshold=0.2)
        assert len(pk) == 2
        dx = g.x[1] - g.x[0]
        assert abs(pk[0].x + pk[1].x) <= dx and abs(pk[0].p + pk[1].p) <= dx
        assert abs(abs(pk[0].x) - xbar) < 0.25 * xbar
        assert g.total() == pytest.approx(1.0, abs=1e-3)

    def test_np_steady_state_single_central_peak(self, np50):
        g = PS.husimi_q(PS.partial_trace_mode(np50.steady), nx=121, np_=121)
        pk = PS.find_peaks(g)
        dx = g.x[1] - g.x[0]
        assert len(pk) == 1 and abs(pk[0].x) <= dx and abs(pk[0].p) <= dx
        assert g.total() == pytest.approx(1.0, abs=1e-3)


def gaussians(centres, x=np.linspace(-6, 6, 121)):
    X, P = np.meshgrid(x, x, indexing="ij")
    v = sum(np.exp(-((X - a) ** 2 + (P - b) ** 2)) for a, b in centres)
    return PS.QGrid(x, x, v)


class TestPeaks:
    def test_single(self):
        pk = PS.find_peaks(gaussians([(1.0, -0.5)]))
        assert len(pk) == 1 and (pk[0].x, pk[0].p) == pytest.approx((1.0, -0.5), abs=0.1)

    def test_two_separated(self):
        pk = PS.find_peaks(gaussians([(-3.0, 0.0), (3.0, 1.0)]))
        assert len(pk) == 2
        assert sorted((round(p.x, 6), round(p.p, 6)) for p in pk) == [(-3.0, 0.0), (3.0, 1.0)]

    def test_threshold_drops_small_peak(self):
        g = gaussians([(-3.0, 0.0)])
        X, P = np.meshgrid(g.x, g.p, indexing="ij")
        g.values = g.values + 0.1 * np.exp(-((X - 3) ** 2 + P ** 2))
        assert len(PS.find_peaks(g, 0.05)) == 2
        assert len(PS.find_peaks(g, 0.2)) == 1

    def test_plateau_counted_once(self):
        x = np.linspace(-2, 2, 21)
        v = np.zeros((21, 21))
        v[8:11, 9:12] = 1.0
        pk = PS.find_peaks(PS.QGrid(x, x, v))
        assert len(pk) == 1 and pk[0].plateau
        assert (pk[0].x, pk[0].p) == pytest.approx((x[8], x[9]))

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            PS.find_peaks(gaussians([(0, 0)]), 1.0)


class TestQuadratureBasis:
    def test_diagonalizes_x(self):
        b = PS.quadrature_basis(HilbertSpace(25))
        a = H.mode_annihilation(25).toarray()
        x = (a + a.T) / math.sqrt(2)
        V = b.vectors
        assert np.max(np.abs(V.T @ x @ V - np.diag(b.nodes))) < 1e-10
        assert np.max(np.abs(V.T @ V - np.eye(25))) < 1e-12
        assert np.all(np.diff(b.nodes) > 0)

    def test_nodes_are_hermite_roots(self):
        from numpy.polynomial.hermite import hermroots
        nodes = PS.quadrature_basis(12).nodes
        roots = np.sort(hermroots([0] * 12 + [1]))
        assert np.max(np.abs(nodes - roots)) < 1e-10

    def test_vacuum_feature(self):
        s = HilbertSpace(30)
        b = PS.quadrature_basis(s)
        P = PS.eigenstate_feature(s.basis(0, DOWN), b)
        assert np.all(P[UP] == 0)
        # vacuum weight at node j is the squared first entry of eigenvector j
        ref = b.vectors[0, :] ** 2
        assert np.max(np.abs(P[DOWN] - ref)) < 1e-12
        assert P[DOWN].argmax() in (14, 15)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), phase=st.floats(0, 2 * math.pi))
    def test_normalized_and_phase_invariant(self, seed, phase):
        s = HilbertSpace(10)
        psi = random_state(s.dim, np.random.default_rng(seed))
        b = PS.quadrature_basis(s)
        P = PS.eigenstate_feature(psi, b)
        assert P.min() >= 0 and abs(P.sum() - 1) < 1e-10
        assert np.max(np.abs(P - PS.eigenstate_feature(np.exp(1j * phase) * psi, b))) < 1e-12

    def test_parity_partner_features_reflect(self, smp50):
        w, V = np.linalg.eigh(smp50.steady)
        i, j = np.argsort(w)[::-1][:2]
        b = PS.quadrature_basis(smp50.space)
        # rotate the near-degenerate pair into parity-broken states
        plus, minus = (V[:, i] + V[:, j]) / math.sqrt(2), (V[:, i] - V[:, j]) / math.sqrt(2)
        Pp, Pm = PS.eigenstate_feature(plus, b), PS.eigenstate_feature(minus, b)
        assert np.max(np.abs(Pp - Pm[:, ::-1])) < 1e-6


class TestExport:
    def test_csv_and_sidecar(self, tmp_path):
        g = PS.husimi_q(fock_projector(10), (-5, 5), nx=11, np_=21)
        csv_path, json_path = g.export(tmp_path / "q")
        rows = csv_path.read_bytes().decode().split("\r\n")
        assert len([r for r in rows if r]) == 11 and len(rows[0].split(",")) == 21
        back = np.loadtxt(csv_path, delimiter=",")
        assert np.array_equal(back, g.values)
        side = json.loads(json_path.read_text())
        assert side["nx"] == 11 and side["np"] == 21 and side["scale"] == "linear"
        assert side["cell_area"] == pytest.approx(0.5 * 1.0 * 0.5)

    def test_log_export(self, tmp_path):
        g = PS.husimi_q(fock_projector(10), (-5, 5), nx=11, np_=11)
        csv_path, json_path = g.export(tmp_path / "qlog", log=True)
        assert np.allclose(np.loadtxt(csv_path, delimiter=","), np.log10(g.values))
        assert json.loads(json_path.read_text())["scale"] == "log10"
