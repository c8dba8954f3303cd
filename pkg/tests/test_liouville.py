import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import lam_c_multiple, random_density
from dissrabi import liouville as L
from dissrabi.errors import ResourceError, SolverError
from dissrabi.hilbert import DOWN, HilbertSpace, SystemParams, parity, quadratures, spin_ops


def ground_projector(space):
    v = space.basis(0, DOWN)
    return np.outer(v, v.conj())


@pytest.fixture(scope="module")
def small_smp():
    p = lam_c_multiple(1.4, omega0=1.0, Omega=10.0, kappa=0.5, gamma=0.05)
    space = HilbertSpace(12)
    return p, space, L.build(p, space)


class TestVectorization:
    def test_column_stacking(self, rng):
        A, B, R = (rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)) for _ in range(3))
        lhs = L.vec(A @ R @ B)
        rhs = (L.spre(A) @ L.spost(B)) @ L.vec(R)
        assert np.allclose(lhs, rhs)
        assert np.array_equal(L.unvec(L.vec(R)), R)

    def test_dissipator_matches_definition(self, rng):
        c = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        R = random_density(3, rng)
        D = L.unvec(L.dissipator(c, 0.7) @ L.vec(R))
        cdc = c.conj().T @ c
        ref = 0.7 * (2 * c @ R @ c.conj().T - cdc @ R - R @ cdc)
        assert np.allclose(D, ref)


class TestBuild:
    def test_trace_preservation(self, fig2_smp):
        Lv = L.build(fig2_smp, HilbertSpace(20))
        row = L.trace_row(Lv.space.dim)
        assert np.max(np.abs(row.conj() @ Lv.generator)) < 1e-10

    def test_parity_superoperator_commutes(self, fig2_smp):
        Lv = L.build(fig2_smp, HilbertSpace(20))
        S = L.parity_superoperator(Lv.space)
        C = (Lv.generator @ S - S @ Lv.generator)
        assert (abs(C).max() if C.nnz else 0.0) < 1e-10

    def test_master_equation_terms(self, rng):
        p = SystemParams(omega0=1.3, Omega=2.0, lam=0.8, kappa=0.4, gamma=0.1)
        space = HilbertSpace(5)
        Lv = L.build(p, space)
        R = random_density(space.dim, rng)
        from dissrabi.hilbert import annihilation, hamiltonian
        Hm = hamiltonian(p, space).dense()
        a = annihilation(space).dense()
        sm = spin_ops(space)["sm"].dense()
        def D(c, g):
            return 2 * g * c @ R @ c.conj().T - g * c.conj().T @ c @ R - g * R @ c.conj().T @ c
        ref = -1j * (Hm @ R - R @ Hm) + D(a, p.kappa) + D(sm, p.gamma)
        assert np.allclose(Lv.apply(R), ref, atol=1e-13)

    def test_resource_budget(self, fig2_smp):
        with pytest.raises(ResourceError):
            L.build(fig2_smp, HilbertSpace(400), memory_budget=10 ** 6)


class TestSteadyState:
    def test_decoupled_ground_state(self):
        space = HilbertSpace(6)
        rho = L.steady_state(L.build(SystemParams(lam=0.0, Omega=3.0), space))
        assert np.max(np.abs(rho - ground_projector(space))) < 1e-10

    def test_contract(self, small_smp):
        _, space, Lv = small_smp
        rho = L.steady_state(Lv)
        assert np.linalg.norm(Lv.generator @ L.vec(rho)) < 1e-10
        chk = L.check_physical(rho)
        assert chk["hermiticity"] < 1e-12
        assert chk["min_eigenvalue"] > -1e-10
        assert abs(chk["trace"] - 1) < 1e-12

    def test_normal_phase_parity(self, fig2_np):
        res = L.converged_cutoff(fig2_np)
        x, p = quadratures(res.space)
        assert abs(x.expect(res.steady)) < 1e-8
        assert abs(p.expect(res.steady)) < 1e-8

    def test_nonconvergence_reports(self, small_smp):
        with pytest.raises(SolverError) as err:
            L.steady_state(small_smp[2], tol=1e-30, maxiter=1)
        assert err.value.diagnostics["residuals"]

    def test_converged_cutoff_grows(self):
        p = SystemParams.from_ratio(1.4, Omega=10.0)
        res = L.converged_cutoff(p)
        assert res.tail < 1e-6
        assert res.history[0][0] == res.history[0][0] and res.history[-1][0] == res.space.fock_cutoff
        assert all(t >= 1e-6 for _, t in res.history[:-1])

    def test_cutoff_doubling(self):
        p = SystemParams.from_ratio(1.4, Omega=10.0)
        res = L.converged_cutoff(p)
        N = res.space.fock_cutoff
        g1 = L.gap(res.liouvillian).delta
        g2 = L.gap(L.build(p, HilbertSpace(2 * N))).delta
        assert abs(g1 - g2) / g2 < 1e-4
        sz = spin_ops(res.space)["sz"].expect(res.steady).real
        big = HilbertSpace(2 * N)
        sz2 = spin_ops(big)["sz"].expect(L.steady_state(L.build(p, big))).real
        assert abs(sz - sz2) < 1e-5


def analytic_decoupled(p, N):
    n = np.arange(N)
    mode = (-p.kappa * (n[:, None] + n[None, :]) - 1j * p.omega0 * (n[:, None] - n[None, :])).ravel()
    spin = np.array([0, -2 * p.gamma, -p.gamma + 1j * p.Omega, -p.gamma - 1j * p.Omega])
    return (mode[:, None] + spin[None, :]).ravel()


def match_sets(a, b):
    """Max distance after greedy nearest matching of two equal-size complex sets."""
    b = list(b)
    worst = 0.0
    for z in a:
        j = int(np.argmin(np.abs(np.array(b) - z)))
        worst = max(worst, abs(b.pop(j) - z))
    return worst


class TestSpectrum:
    def test_decoupled_composition(self):
        p = SystemParams(omega0=1.0, Omega=3.0, lam=0.0, kappa=0.5, gamma=0.05)
        N = 6
        Lv = L.build(p, HilbertSpace(N))
        vals = np.linalg.eigvals(Lv.generator.toarray())
        assert match_sets(vals, analytic_decoupled(p, N)) < 1e-9

    def test_decoupled_gap_is_gamma(self):
        p = SystemParams(omega0=1.0, Omega=3.0, lam=0.0, kappa=0.5, gamma=0.05)
        g = L.gap(L.build(p, HilbertSpace(6)), method="dense")
        assert g.delta == pytest.approx(0.05, abs=1e-12)
        assert abs(abs(g.lambda1.imag) - 3.0) < 1e-12

    def test_gap_continuous_near_zero_coupling(self):
        base = SystemParams(omega0=1.0, Omega=3.0, lam=0.0, kappa=0.5, gamma=0.05)
        gaps = [L.gap(L.build(base.replace(lam=lam), HilbertSpace(6)), method="dense").delta
                for lam in (0.0, 0.01, 0.02)]
        assert gaps[0] == pytest.approx(0.05, abs=1e-12)
        # second-order perturbation: the shift grows like lambda^2
        d1, d2 = gaps[1] - gaps[0], gaps[2] - gaps[0]
        assert abs(d1) < 1e-3
        assert d2 == pytest.approx(4 * d1, rel=0.05)

    def test_contract(self, small_smp):
        _, space, Lv = small_smp
        spectral = L.spectrum(Lv, k=8)
        vals = spectral.eigenvalues
        assert abs(vals[0]) < 1e-10
        assert np.all(vals.real <= 1e-8)
        assert np.all(np.diff(vals.real) <= 1e-10)
        assert L.conjugate_closed(vals)
        rho = L.steady_state(Lv)
        assert np.max(np.abs(spectral.right_states[0] - rho)) < 1e-8
        G = np.array([[np.vdot(w, r) for r in spectral.right_states] for w in spectral.left_states])
        assert np.max(np.abs(G - np.eye(len(vals)))) < 1e-8

    def test_sparse_matches_dense(self):
        Lv = L.build(SystemParams.from_ratio(1.4, Omega=10.0), HilbertSpace(6))
        k = 8
        full = np.linalg.eigvals(Lv.generator.toarray())
        sparse = L.spectrum(Lv, k=k, method="sparse")
        vals = sparse.eigenvalues
        # every returned eigenvalue is a true one
        assert max(np.min(np.abs(full - v)) for v in vals) < 1e-8
        # and the selection equals the same rule applied to the dense spectrum
        m = sparse.diagnostics["searched"]
        near = full[np.argsort(np.abs(full - L.DEFAULT_SHIFT))[:m]]
        ref = near[np.lexsort((-near.imag, -np.round(near.real, 12)))][:len(vals)]
        assert match_sets(vals, ref) < 1e-8
        dense = L.spectrum(Lv, k=k, method="dense").eigenvalues
        assert np.max(np.abs(dense[:3] - vals[:3])) < 1e-8

    def test_spectral_reconstruction(self, rng):
        # full dense spectrum: rho(t) = sum_i c_i exp(lambda_i t) rho_i
        p = SystemParams(omega0=1.0, Omega=2.0, lam=0.9, kappa=0.5, gamma=0.1)
        Lv = L.build(p, HilbertSpace(3))
        spectral = L.spectrum(Lv, k=Lv.dim, method="dense")
        rho0 = random_density(6, rng)
        c = spectral.coefficients(rho0)
        t = 1.7
        recon = sum(ci * np.exp(li * t) * ri for ci, li, ri in zip(c, spectral.eigenvalues, spectral.right_states))
        ref = L.propagate(Lv, rho0, [0.0, t], rtol=1e-11, atol=1e-13)[-1]
        assert np.max(np.abs(recon - ref)) < 1e-8
        assert c[0] == pytest.approx(1.0, abs=1e-10)

    def test_gap_ratio_test(self, small_smp):
        g = L.gap(small_smp[2], k=8)
        assert g.delta == pytest.approx(-g.lambda1.real)
        assert g.metastable_dim == 1
        assert g.ratios[0] < 0.2

    def test_gap_from_eigenvalues_warns_when_ambiguous(self):
        g = L.gap_from_spectrum(np.array([0, -0.1, -0.1 + 1e-12, -0.11]))
        assert g.warning is not None


class TestPropagate:
    def test_stationary(self, small_smp):
        _, _, Lv = small_smp
        rho = L.steady_state(Lv)
        out = L.propagate(Lv, rho, [0, 5, 20])
        assert max(np.max(np.abs(r - rho)) for r in out) < 1e-8

    def test_physicality(self, small_smp, rng):
        _, space, Lv = small_smp
        rho0 = random_density(space.dim, rng, rank=1)
        out = L.propagate(Lv, rho0, np.linspace(0, 10, 11))
        for r in out:
            assert np.real(np.trace(r @ r)) <= 1 + 1e-10
            assert np.max(np.abs(r - r.conj().T)) < 1e-10
            assert abs(np.trace(r) - 1) < 1e-8 * 10

    def test_long_time_reaches_steady_state(self):
        p = SystemParams.from_ratio(1.4, Omega=6.0)
        Lv = L.build(p, HilbertSpace(10))
        rho = L.steady_state(Lv)
        out = L.propagate(Lv, np.eye(20) / 20, [0, 400.0], rtol=1e-8, atol=1e-10)[-1]
        assert L.trace_distance(out, rho) < 1e-6


@settings(max_examples=10, deadline=None)
@given(lam=st.floats(0, 3), k=st.floats(0.01, 1), g=st.floats(0.01, 0.5), N=st.integers(2, 6))
def test_generator_invariants_property(lam, k, g, N):
    p = SystemParams(omega0=1.0, Omega=2.0, lam=lam, kappa=k, gamma=g)
    Lv = L.build(p, HilbertSpace(N))
    row = L.trace_row(Lv.space.dim)
    assert np.max(np.abs(row.conj() @ Lv.generator)) < 1e-10
    C = Lv.generator @ L.parity_superoperator(Lv.space) - L.parity_superoperator(Lv.space) @ Lv.generator
    assert (abs(C).max() if C.nnz else 0.0) < 1e-10
    vals = np.linalg.eigvals(Lv.generator.toarray())
    assert np.all(vals.real <= 1e-8)
