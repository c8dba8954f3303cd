import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dissrabi import meanfield as M
from dissrabi.errors import StiffnessError
from dissrabi.hilbert import SystemParams
from dissrabi.meanfield import MFState


class TestRhs:
    def test_zero_at_normal_point(self, fig2_smp):
        assert np.all(M.rhs(fig2_smp, MFState()) == 0)

    def test_direct_substitution(self):
        p = SystemParams(omega0=1.0, Omega=3.0, lam=0.0, kappa=0.5, gamma=0.05)
        d = M.rhs(p, MFState(x=1.0))
        assert d[0] == pytest.approx(-0.5) and d[1] == pytest.approx(-1.0)

    def test_constant_term_in_sz(self):
        p = SystemParams(gamma=0.3, lam=0.0)
        # sz = 0 with no coupling: only the -2 gamma constant survives
        assert M.rhs(p, MFState(sz=0.0))[4] == pytest.approx(-0.6)

    def test_zero_at_breaking_points(self, fig2_smp):
        for fp in M.fixed_points(fig2_smp)[1:]:
            assert np.max(np.abs(M.rhs(fig2_smp, fp.state))) < 1e-10


class TestCriticalCoupling:
    def test_lossless(self):
        p = SystemParams(omega0=1.0, Omega=40.0, kappa=0.0, gamma=0.0)
        assert M.critical_coupling(p) == pytest.approx(math.sqrt(20.0), rel=1e-15)

    def test_cavity_loss_only(self):
        p = SystemParams(omega0=1.0, Omega=40.0, kappa=0.5, gamma=0.0)
        assert M.critical_coupling(p) == pytest.approx(math.sqrt(20.0) * math.sqrt(1.25), rel=1e-15)

    def test_fig2_value(self, fig2_smp):
        assert M.critical_coupling(fig2_smp) ** 2 == pytest.approx(750.0, abs=5e-4)


class TestFixedPoints:
    def test_normal_phase_single_physical(self, fig2_np):
        fps = M.fixed_points(fig2_np)
        phys = [f for f in fps if f.physical]
        assert len(phys) == 1
        assert phys[0].branch == M.PARITY_PRESERVING
        assert np.all(phys[0].state.array() == [0, 0, 0, 0, -1])

    def test_smp_values(self, fig2_smp):
        fps = {f.branch: f for f in M.fixed_points(fig2_smp)}
        plus, minus = fps[M.BREAKING_PLUS].state, fps[M.BREAKING_MINUS].state
        assert plus.sz == pytest.approx(-M.critical_coupling(fig2_smp) ** 2 / fig2_smp.lam ** 2, rel=1e-14)
        assert plus.sz == pytest.approx(-0.63776, abs=1e-5)
        assert abs(plus.sx) == pytest.approx(0.6797, abs=1e-4)
        assert abs(plus.x) == pytest.approx(18.65, abs=0.01)
        assert np.sign(plus.x) == -np.sign(plus.sx)
        ratio = -(fig2_smp.lam / fig2_smp.omega0) / (1 + fig2_smp.kappa ** 2)
        assert plus.x / plus.sx == pytest.approx(ratio, rel=1e-12)
        assert np.allclose(minus.array(), plus.parity_image().array(), atol=0)

    def test_physical_iff_inside_ball(self, fig2_smp):
        for fp in M.fixed_points(fig2_smp):
            assert fp.physical == (abs(fp.state.sz) <= 1)

    @settings(max_examples=40, deadline=None)
    @given(factor=st.floats(1.01, 4.0), Om=st.floats(2.0, 2000.0), k=st.floats(0.0, 2.0), g=st.floats(0.0, 1.0))
    def test_all_fixed_points_are_stationary(self, factor, Om, k, g):
        from conftest import lam_c_multiple
        p = lam_c_multiple(factor, Omega=Om, kappa=k, gamma=g)
        for fp in M.fixed_points(p):
            assert fp.physical
            scale = max(1.0, np.max(np.abs(fp.state.array()))) * max(1.0, p.lam, p.Omega)
            assert np.max(np.abs(M.rhs(p, fp.state))) < 1e-10 * scale


class TestStability:
    def test_normal_point_stable_below(self, fig2_np):
        fp = M.fixed_points(fig2_np)[0]
        assert np.all(fp.eigenvalues.real < 0) and fp.stability == "stable"

    def test_normal_point_saddle_above(self, fig2_smp):
        fp = M.fixed_points(fig2_smp)[0]
        assert np.sum(fp.eigenvalues.real > 0) == 1 and fp.stability == "saddle"

    def test_breaking_points_stable(self, fig2_smp):
        for fp in M.fixed_points(fig2_smp)[1:]:
            assert np.all(fp.eigenvalues.real < 0) and fp.stability == "stable"

    def test_matches_numerical_jacobian(self, fig2_smp):
        for fp in M.fixed_points(fig2_smp):
            J = M.numerical_jacobian(fig2_smp, fp.state)
            assert np.max(np.abs(M.stability_matrix(fig2_smp, fp) - J)) < 1e-5

    def test_printed_form_differs_only_in_one_entry(self, fig2_smp):
        fp = M.fixed_points(fig2_smp)[1]
        d = M.stability_matrix(fig2_smp, fp) - M.stability_matrix(fig2_smp, fp, as_printed=True)
        nz = np.argwhere(d != 0)
        assert nz.tolist() == [[4, 0]]
        assert d[4, 0] == pytest.approx(4 * fig2_smp.lam * fp.state.sy)
        # the qualitative picture is the same with either sign
        assert np.all(np.linalg.eigvals(M.stability_matrix(fig2_smp, fp, as_printed=True)).real < 0)

    @settings(max_examples=30, deadline=None)
    @given(factor=st.floats(1.05, 3.0), Om=st.floats(5.0, 1500.0), k=st.floats(0.05, 1.0), g=st.floats(0.0, 0.5))
    def test_parity_partners_share_spectrum(self, factor, Om, k, g):
        from conftest import lam_c_multiple
        p = lam_c_multiple(factor, Omega=Om, kappa=k, gamma=g)
        _, plus, minus = M.fixed_points(p)
        a = np.sort_complex(np.round(plus.eigenvalues, 8))
        b = np.sort_complex(np.round(minus.eigenvalues, 8))
        assert np.allclose(a, b, atol=1e-7 * max(1.0, Om))
        assert plus.stability == minus.stability


class TestQuench:
    def test_np_protocol(self, fig2_np):
        s = M.quench_np(fig2_np, 10.0, math.pi / 7)
        assert s.x == pytest.approx(10 * math.cos(2 * math.pi / 7))
        assert s.p == pytest.approx(10 * math.sin(2 * math.pi / 7))
        assert (s.sx, s.sy, s.sz) == (0.0, 0.0, -1.0)

    def test_identity_angle(self, fig2_smp):
        fp = M.fixed_points(fig2_smp)[1]
        assert M.quench_smp(fig2_smp, fp, 0.0) == fp.state

    def test_pi_flips_spin(self, fig2_smp):
        fp = M.fixed_points(fig2_smp)[1]
        s = M.quench_smp(fig2_smp, fp, math.pi)
        assert s.sx == pytest.approx(-fp.state.sx, abs=1e-15)
        assert s.sz == pytest.approx(-fp.state.sz, abs=1e-15)
        assert (s.x, s.p, s.sy) == (fp.state.x, fp.state.p, fp.state.sy)

    def test_rejects_normal_point(self, fig2_smp):
        with pytest.raises(ValueError):
            M.quench_smp(fig2_smp, M.fixed_points(fig2_smp)[0], 0.3)


class TestIntegrate:
    def test_fixed_point_constant(self, fig2_np):
        tr = M.integrate(fig2_np, MFState(), 5.0, n_out=11)
        assert np.all(tr.y == MFState().array())

    def test_rejects_bad_tol(self, fig2_np):
        with pytest.raises(ValueError):
            M.integrate(fig2_np, MFState(), 1.0, tol=0)

    def test_failure_raises(self, fig2_np, monkeypatch):
        from types import SimpleNamespace
        failed = SimpleNamespace(status=-1, message="Required step size is less than spacing between numbers.")
        monkeypatch.setattr(M, "solve_ivp", lambda *a, **k: failed)
        with pytest.raises(StiffnessError):
            M.integrate(fig2_np, MFState(x=1.0), 1.0)

    def test_np_quench_returns_to_origin(self):
        p = SystemParams.from_ratio(0.6, Omega=50.0, gamma=0.5)
        tr = M.integrate(p, M.quench_np(p, 10.0, math.pi / 7), 100.0)
        assert M.settle_time(tr, M.fixed_points(p)[0]) < 100.0
        assert M.settle(tr, M.fixed_points(p)).branch == M.PARITY_PRESERVING

    def test_np_quench_slow_spin_relaxation(self):
        # with gamma = 0.05 the spin coherences need a few hundred time units
        p = SystemParams.from_ratio(0.6, Omega=50.0)
        tr = M.integrate(p, M.quench_np(p, 10.0, math.pi / 7), 400.0)
        t = M.settle_time(tr, M.fixed_points(p)[0])
        assert 100.0 < t < 400.0

    @pytest.mark.parametrize("theta", [math.pi / 2, 3 * math.pi / 4])
    def test_smp_quench_settles_on_breaking_point(self, theta):
        p = SystemParams.from_ratio(1.4, Omega=50.0)
        fps = M.fixed_points(p)
        tr = M.integrate(p, M.quench_smp(p, fps[1], theta), 500.0)
        end = M.settle(tr, fps[1:])
        assert end is not None and end.branch in (M.BREAKING_PLUS, M.BREAKING_MINUS)
        assert np.linalg.norm(tr.y[-1] - end.state.array()) < 1e-6

    def test_settle_unresolved(self, fig2_smp):
        fps = M.fixed_points(fig2_smp)
        tr = M.MFTrajectory(np.linspace(0, 20, 21), np.tile([1.0, 0, 0, 0, -1], (21, 1)))
        assert M.settle(tr, fps) is None


class TestBlochBall:
    def test_norm_can_grow_inside_ball(self):
        p = SystemParams(gamma=0.05, lam=0.0)
        s = MFState(sz=-0.5)
        d = M.rhs(p, s)
        assert float(s.array()[2:] @ d[2:]) > 0

    @settings(max_examples=15, deadline=None)
    @given(u=st.floats(-1, 1), phi=st.floats(0, 2 * math.pi), r=st.floats(0.0, 1.0),
           x=st.floats(-5, 5), factor=st.floats(0.3, 2.0))
    def test_ball_is_invariant(self, u, phi, r, x, factor):
        from conftest import lam_c_multiple
        p = lam_c_multiple(factor, Omega=10.0, kappa=0.5, gamma=0.2)
        rho = r * math.sqrt(1 - u * u)
        s0 = MFState(x, 0.0, rho * math.cos(phi), rho * math.sin(phi), r * u)
        tr = M.integrate(p, s0, 20.0, n_out=401)
        assert M.bloch_norms(tr).max() <= 1 + 1e-9

    def test_starting_on_sphere_stays_inside(self):
        p = SystemParams.from_ratio(1.4, Omega=10.0, gamma=0.2)
        tr = M.integrate(p, MFState(2.0, 0.0, 0.6, 0.0, -0.8), 30.0, n_out=3001)
        n = M.bloch_norms(tr)
        assert n[0] == pytest.approx(1.0)
        assert n.max() <= 1 + 1e-9
