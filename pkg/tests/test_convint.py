"""Staircase profiles, the P operator, and certified oscillation patches."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import cumulative_trapezoid, simpson

from cvxint.convint import (
    BoxCutoff,
    OscillationSpec,
    Patch,
    PatchError,
    build_oscillation,
    build_patch,
    empty_patch,
    fd_divergence,
    p_operator,
    smoothstep5,
    staircase_profile,
    _certification_lattice,
)
from cvxint.divinv import BoxDomain
from cvxint.flux import sigma
from cvxint.hull import RankOneFrame, ReducedPoint, rank_one_decompose

DELTA_M2 = 2.5 / 7.25  # delta for the M = 2, slack = 0.5 profile


@pytest.fixture(scope="module")
def profile_unit():
    return staircase_profile(1.0, 1.0, (0.0, 1.0), 1e-2, seed=0)


@pytest.fixture(scope="module")
def frame_2d():
    return rank_one_decompose(np.array([1.0, 0.0]), np.array([0.3, 0.0]))


@pytest.fixture(scope="module")
def unit_box_2d():
    return BoxDomain(intervals=((0.0, 1.0), (0.0, 1.0)), time=(0.0, 1.0))


@pytest.fixture(scope="module")
def oscillation_example(frame_2d, unit_box_2d):
    spec = OscillationSpec(frame=frame_2d, lam1=1.0, lam2=1.0,
                           box=unit_box_2d, eps=0.1, seed=0)
    return build_oscillation(spec)


@pytest.fixture(scope="module")
def worked_patch(unit_box_2d):
    target = ReducedPoint(p=np.array([1.0, 0.0]), beta=np.array([0.3, 0.0]))
    return build_patch(target, 0.1, unit_box_2d, 1e-2, 0.1, unit_box_2d, seed=0)


# ---------------------------------------------------------------------------
# staircase profile
# ---------------------------------------------------------------------------

class TestStaircase:
    def test_period_formula(self, profile_unit):
        # tau * min(1, lam1, lam2) / (4 (lam1 + lam2)) with tau = 1e-2
        assert profile_unit.period == pytest.approx(1.25e-3, rel=1e-14)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            staircase_profile(1.0, 1.0, (1.0, 0.0), 1e-2)
        with pytest.raises(ValueError):
            staircase_profile(1.0, 1.0, (0.0, 1.0), 0.3)  # tau >= (l-k)/4
        with pytest.raises(ValueError):
            staircase_profile(1.0, 1.0, (0.0, 1.0), 0.0)
        with pytest.raises(ValueError):
            staircase_profile(-1.0, 1.0, (0.0, 1.0), 1e-2)

    def test_underflow_rejected(self):
        with pytest.raises(PatchError, match="underflows grid representation"):
            staircase_profile(1.0, 1.0, (0.0, 1e-9), 1e-12)

    def test_double_integration_oracle(self, profile_unit):
        # integrate f'' twice numerically and compare with the closed form
        prof = profile_unit
        y = np.linspace(prof.y0, prof.y0 + prof.period, 200001)
        fp_oracle = cumulative_trapezoid(prof.fpp(y), y, initial=0.0)
        f_oracle = cumulative_trapezoid(prof.fp(y), y, initial=0.0)
        assert np.max(np.abs(fp_oracle - prof.fp(y))) < 1e-9
        assert np.max(np.abs(f_oracle - prof.f(y))) < 1e-9

    def test_second_derivative_pinch(self, profile_unit):
        # f'' stays inside [-lam1, lam2] and touches both levels
        prof = profile_unit
        y = np.linspace(0.0, 1.0, 300001)
        vals = prof.fpp(y)
        assert vals.min() >= -prof.lam1 - 1e-12
        assert vals.max() <= prof.lam2 + 1e-12
        assert np.any(np.abs(vals + prof.lam1) < 1e-12)
        assert np.any(np.abs(vals - prof.lam2) < 1e-12)

    def test_compact_support(self, profile_unit):
        prof = profile_unit
        y0, y1 = prof.window
        probes = np.array([0.0, y0, y0 - 1e-9, y1, y1 + 1e-9, 1.0])
        for order in (0, 1, 2):
            assert np.all(prof(probes, order) == 0.0)

    def test_period_seams_clean(self, profile_unit):
        # f and f' return to zero at every period boundary up to the
        # builder's own closure gate (1e-12 * (lam1 + lam2))
        prof = profile_unit
        seams = prof.y0 + prof.period * np.arange(prof.n_periods + 1)
        assert np.max(np.abs(prof.f(seams))) < 2e-12
        assert np.max(np.abs(prof.fp(seams))) < 2e-12

    def test_mean_zero_per_period(self, profile_unit):
        prof = profile_unit
        for j in range(3):
            y = np.linspace(prof.y0 + j * prof.period,
                            prof.y0 + (j + 1) * prof.period, 40001)
            assert abs(simpson(prof.fpp(y), x=y)) < 1e-10

    def test_sup_fp_bound(self, profile_unit):
        # extreme of f' is lam1 lam2 P / (2 (lam1 + lam2)) up to corner loss
        prof = profile_unit
        bound = prof.lam1 * prof.lam2 * prof.period / (2.0 * (prof.lam1 + prof.lam2))
        assert prof.sup_fp <= bound * (1.0 + 1e-9)
        assert prof.sup_fp >= 0.5 * bound

    def test_bad_measure_sampled(self, profile_unit):
        prof = profile_unit
        y = np.linspace(0.0, 1.0, 100001)
        vals = prof.fpp(y)
        off = (np.abs(vals + prof.lam1) > 1e-9) & (np.abs(vals - prof.lam2) > 1e-9)
        assert np.mean(off) * 1.0 < prof.tau
        assert prof.bad_measure < prof.tau

    def test_norm_certificate(self, profile_unit):
        assert profile_unit.sup_f + profile_unit.sup_fp < profile_unit.tau

    def test_seed_jitter(self):
        a = staircase_profile(1.0, 1.0, (0.0, 1.0), 1e-2, seed=0)
        b = staircase_profile(1.0, 1.0, (0.0, 1.0), 1e-2, seed=1)
        c = staircase_profile(1.0, 1.0, (0.0, 1.0), 1e-2, seed=0)
        assert a.y0 != b.y0
        assert a.y0 == c.y0

    @given(
        lam1=st.floats(0.2, 5.0),
        lam2=st.floats(0.2, 5.0),
        tau=st.floats(1e-3, 0.2),
    )
    @settings(max_examples=25, deadline=None)
    def test_profile_properties(self, lam1, lam2, tau):
        prof = staircase_profile(lam1, lam2, (0.0, 1.0), tau, seed=2)
        assert prof.period == pytest.approx(
            tau * min(1.0, lam1, lam2) / (4.0 * (lam1 + lam2)), rel=1e-12)
        y = np.linspace(0.0, 1.0, 20001)
        vals = prof.fpp(y)
        assert vals.min() >= -lam1 - 1e-10
        assert vals.max() <= lam2 + 1e-10
        assert prof.sup_f + prof.sup_fp < tau
        edges = np.array([0.0, 1.0])
        assert np.all(prof.f(edges) == 0.0)
        assert np.all(prof.fp(edges) == 0.0)


# ---------------------------------------------------------------------------
# cutoff and the P operator
# ---------------------------------------------------------------------------

class TestCutoffAndOperator:
    def test_smoothstep_endpoints(self):
        x = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
        np.testing.assert_allclose(smoothstep5(x), [0.0, 0.0, 0.5, 1.0, 1.0])

    def test_box_cutoff_plateau_and_walls(self):
        cut = BoxCutoff(lo=[0.0, 0.0, 0.0], hi=[1.0, 1.0, 1.0], w=[0.1, 0.1, 0.1])
        X = np.array([[0.5, 0.5], [0.0, 0.5], [1.0, 0.5], [0.05, 0.5]])
        t = np.array([0.5, 0.5, 0.5, 0.5])
        v = cut.value(X, t)
        assert v[0] == 1.0 and v[1] == 0.0 and v[2] == 0.0
        assert 0.0 < v[3] < 1.0
        # gradient vanishes on the plateau and at the walls
        g = cut.grad(X, t)
        assert np.all(g[[0, 1, 2]] == 0.0)
        assert g[3, 0] != 0.0

    def test_box_cutoff_derivatives_fd(self):
        cut = BoxCutoff(lo=[0.0, 0.0, 0.0], hi=[1.0, 1.0, 1.0], w=[0.2, 0.25, 0.3])
        rng = np.random.default_rng(5)
        X = rng.uniform(0.02, 0.98, (40, 2))
        t = rng.uniform(0.02, 0.98, 40)
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (cut.value(X + e, t) - cut.value(X - e, t)) / (2 * h)
            np.testing.assert_allclose(cut.grad(X, t)[:, i], fd, atol=1e-7)
        fd_t = (cut.value(X, t + h) - cut.value(X, t - h)) / (2 * h)
        np.testing.assert_allclose(cut.dt(X, t), fd_t, atol=1e-7)
        fd_gt = (cut.grad(X, t + h) - cut.grad(X, t - h)) / (2 * h)
        np.testing.assert_allclose(cut.grad_dt(X, t), fd_gt, atol=1e-6)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd_h = (cut.grad(X + e, t) - cut.grad(X - e, t)) / (2 * h)
            np.testing.assert_allclose(cut.hess(X, t)[:, :, i], fd_h, atol=1e-5)

    def test_p_operator_gaussian_divergence_free(self):
        # order-one frame: the FD divergence at 1e3 random points is ~1e-9
        frame = RankOneFrame(q=np.array([0.8, 0.6]), gamma=np.array([-0.6, 0.8]),
                             b=1.0, t_minus=-1.0, t_plus=1.0)

        class GaussH:
            def value(self, X, t):
                X = np.asarray(X)
                r2 = np.sum((X - 0.5) ** 2, axis=-1)
                return np.exp(-8.0 * r2) * np.cos(3.0 * np.asarray(t))

            def gradient(self, X, t):
                X = np.asarray(X)
                return -16.0 * (X - 0.5) * self.value(X, t)[..., None]

        phi, psi = p_operator(GaussH(), frame)
        rng = np.random.default_rng(11)
        X = rng.uniform(0.05, 0.95, (1000, 2))
        t = rng.uniform(0.0, 1.0, 1000)
        assert np.max(np.abs(fd_divergence(psi, X, t, step=1e-6))) < 1e-8
        assert phi(X, t).shape == (1000,)
        assert psi(X, t).shape == (1000, 2)

    def test_p_operator_zero_and_linear(self):
        frame = RankOneFrame(q=np.array([1.0, 0.0]), gamma=np.array([0.0, 1.0]),
                             b=1.0, t_minus=-1.0, t_plus=1.0)

        class Poly:
            def __init__(self, a):
                self.a = a

            def value(self, X, t):
                X = np.asarray(X)
                return self.a * X[..., 0] ** 2 * X[..., 1]

            def gradient(self, X, t):
                X = np.asarray(X)
                return self.a * np.stack(
                    [2.0 * X[..., 0] * X[..., 1], X[..., 0] ** 2], axis=-1)

        rng = np.random.default_rng(3)
        X = rng.uniform(0, 1, (64, 2))
        t = rng.uniform(0, 1, 64)
        phi0, psi0 = p_operator(Poly(0.0), frame)
        assert np.all(phi0(X, t) == 0.0) and np.all(psi0(X, t) == 0.0)
        phi1, psi1 = p_operator(Poly(1.0), frame)
        phi3, psi3 = p_operator(Poly(3.0), frame)
        np.testing.assert_allclose(phi3(X, t), 3.0 * phi1(X, t), rtol=1e-13)
        np.testing.assert_allclose(psi3(X, t), 3.0 * psi1(X, t), rtol=1e-13)

    def test_plane_wave_gradient_is_rank_one(self):
        # h = f(q.x + b t) maps to grad omega = f''(y) eta
        frame = RankOneFrame(q=np.array([0.6, 0.8]), gamma=np.array([0.8, -0.6]),
                             b=0.7, t_minus=-1.0, t_plus=1.0)

        class PlaneWave:
            def value(self, X, t):
                y = np.asarray(X) @ frame.q + frame.b * np.asarray(t)
                return np.sin(2.0 * y)

            def gradient(self, X, t):
                y = np.asarray(X) @ frame.q + frame.b * np.asarray(t)
                return (2.0 * np.cos(2.0 * y))[..., None] * frame.q

        phi, psi = p_operator(PlaneWave(), frame)
        rng = np.random.default_rng(9)
        X = rng.uniform(-1, 1, (32, 2))
        t = rng.uniform(-1, 1, 32)
        y = X @ frame.q + frame.b * t
        fpp = -4.0 * np.sin(2.0 * y)
        eta = frame.eta()
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            dphi_i = (phi(X + e, t) - phi(X - e, t)) / (2 * h)
            np.testing.assert_allclose(dphi_i, fpp * eta[0, i], atol=1e-6)
        phit = (phi(X, t + h) - phi(X, t - h)) / (2 * h)
        np.testing.assert_allclose(phit, fpp * eta[0, 2], atol=1e-6)
        psit = (psi(X, t + h) - psi(X, t - h)) / (2 * h)
        for r in range(2):
            np.testing.assert_allclose(psit[:, r], fpp * eta[1 + r, 2], atol=1e-6)


# ---------------------------------------------------------------------------
# patch channel algebra on a smooth synthetic profile
# ---------------------------------------------------------------------------

class SmoothF:
    def f(self, y):
        return np.sin(3.0 * np.asarray(y, dtype=float))

    def fp(self, y):
        return 3.0 * np.cos(3.0 * np.asarray(y, dtype=float))

    def fpp(self, y):
        return -9.0 * np.sin(3.0 * np.asarray(y, dtype=float))


@pytest.fixture(scope="module")
def smooth_patch():
    frame = RankOneFrame(q=np.array([0.6, 0.8]), gamma=np.array([0.8, -0.6]),
                         b=0.8, t_minus=-1.0, t_plus=1.0)
    cutoff = BoxCutoff(lo=[0.0, 0.0, 0.0], hi=[1.0, 1.0, 1.0],
                       w=[0.2, 0.2, 0.2])
    box = BoxDomain(intervals=((0.0, 1.0), (0.0, 1.0)), time=(0.0, 1.0))
    return Patch(frame=frame, profile=SmoothF(), cutoff=cutoff,
                 support_box=box, lam1=9.0, lam2=9.0)


class TestPatchAlgebra:

    def test_channels_match_finite_differences(self, smooth_patch):
        patch = smooth_patch
        rng = np.random.default_rng(17)
        X = rng.uniform(0.05, 0.95, (48, 2))
        t = rng.uniform(0.05, 0.95, 48)
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (patch.phi(X + e, t) - patch.phi(X - e, t)) / (2 * h)
            np.testing.assert_allclose(patch.dphi(X, t)[:, i], fd, atol=5e-6)
            fd_psi = (patch.psi(X + e, t) - patch.psi(X - e, t)) / (2 * h)
            np.testing.assert_allclose(patch.dpsi(X, t)[:, :, i], fd_psi, atol=5e-6)
        fd_t = (patch.phi(X, t + h) - patch.phi(X, t - h)) / (2 * h)
        np.testing.assert_allclose(patch.phi_t(X, t), fd_t, atol=5e-6)
        fd_pt = (patch.psi(X, t + h) - patch.psi(X, t - h)) / (2 * h)
        np.testing.assert_allclose(patch.psi_t(X, t), fd_pt, atol=5e-6)

    def test_channels_match_p_operator(self, smooth_patch):
        patch = smooth_patch

        class H:
            def value(self, X, t):
                return patch.h_value(X, t)

            def gradient(self, X, t):
                X = np.asarray(X, dtype=float)
                y = X @ patch.frame.q + patch.frame.b * np.asarray(t)
                c = patch.cutoff.value(X, t)
                Dc = patch.cutoff.grad(X, t)
                return (c * patch.profile.fp(y))[..., None] * patch.frame.q \
                    + patch.profile.f(y)[..., None] * Dc

        phi, psi = p_operator(H(), patch.frame)
        rng = np.random.default_rng(23)
        X = rng.uniform(0.0, 1.0, (64, 2))
        t = rng.uniform(0.0, 1.0, 64)
        np.testing.assert_allclose(patch.phi(X, t), phi(X, t), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(patch.psi(X, t), psi(X, t), rtol=1e-12, atol=1e-14)

    def test_divergence_residual_and_fd(self, smooth_patch):
        patch = smooth_patch
        rng = np.random.default_rng(29)
        X = rng.uniform(0.05, 0.95, (200, 2))
        t = rng.uniform(0.05, 0.95, 200)
        assert np.max(np.abs(patch.div_psi_residual(X, t))) < 1e-12
        assert np.max(np.abs(fd_divergence(patch.psi, X, t, step=1e-6))) < 1e-7

    def test_support_vanishing(self, smooth_patch):
        patch = smooth_patch
        X = np.array([[-0.1, 0.5], [1.1, 0.5], [0.5, -0.2], [0.5, 0.5]])
        t = np.array([0.5, 0.5, 0.5, -0.3])
        assert np.all(patch.phi(X, t) == 0.0)
        assert np.all(patch.psi(X, t) == 0.0)
        assert np.all(patch.grad_omega(X, t) == 0.0)


# ---------------------------------------------------------------------------
# certified builders
# ---------------------------------------------------------------------------

class TestBuildOscillation:
    def test_example_certificates(self, oscillation_example):
        certs = oscillation_example.certificates
        assert certs["div_residual"] <= 1e-8
        assert certs["off_state_measure"] < 0.1
        assert certs["segment_distance"] < 0.1
        assert certs["omega_sup"] < 0.1
        assert certs["slice_mean"] == 0.0
        assert certs["attempts"] <= 8

    def test_two_level_gradient(self, oscillation_example, frame_2d, unit_box_2d):
        patch = oscillation_example
        X, t, _, vol = _certification_lattice(unit_box_2d)
        grad = patch.grad_omega(X, t)
        eta = frame_2d.eta()
        scale = 1e-9 * (1.0 + 2.0 * np.sqrt(np.sum(eta * eta)))
        d1 = np.sqrt(np.sum((grad + eta) ** 2, axis=(-2, -1)))
        d2 = np.sqrt(np.sum((grad - eta) ** 2, axis=(-2, -1)))
        on1 = d1 <= scale
        on2 = d2 <= scale
        assert np.mean(on1) > 0.05
        assert np.mean(on2) > 0.05
        assert np.mean(on1 | on2) > 0.9

    def test_per_slice_mean_zero(self):
        # 1D oscillation: the slice integral of phi vanishes to quadrature
        frame = rank_one_decompose(np.array([2.0]), np.array([0.357]),
                                   b_scale=1e-3)
        box = BoxDomain(intervals=((0.0, 1.0),), time=(0.0, 1.0))
        spec = OscillationSpec(frame=frame, lam1=0.5, lam2=0.5, box=box,
                               eps=0.1, seed=0)
        patch = build_oscillation(spec)
        period = patch.profile.period
        nx = min(int(40.0 / period), 4_000_001) | 1
        x = np.linspace(0.0, 1.0, nx)
        for tval in (0.25, 0.5, 0.75):
            vals = patch.phi(x[:, None], np.full(nx, tval))
            assert abs(simpson(vals, x=x)) < 1e-10
        # exact form: the cutoff kills rho_c h on the spatial walls
        walls = np.array([[0.0], [1.0]])
        assert np.all(patch.h_value(walls, np.array([0.5, 0.5])) == 0.0)

    def test_support_inside_box(self, oscillation_example):
        patch = oscillation_example
        X = np.array([[1.2, 0.5], [-0.2, 0.5], [0.5, 1.01]])
        t = np.array([0.5, 0.5, 0.5])
        assert np.all(patch.phi(X, t) == 0.0)
        assert np.all(patch.psi(X, t) == 0.0)

    def test_scaling_doubles_gradient_sup(self, unit_box_2d):
        frame = rank_one_decompose(np.array([1.0, 0.0]), np.array([0.3, 0.0]))
        X, t, _, _ = _certification_lattice(unit_box_2d)
        eta = frame.eta()
        sups = []
        for s in (1.0, 2.0):
            spec = OscillationSpec(frame=frame, lam1=s, lam2=s,
                                   box=unit_box_2d, eps=0.2, seed=3)
            patch = build_oscillation(spec)
            grad = patch.grad_omega(X, t)
            tol = 1e-9 * (1.0 + 2.0 * s * np.sqrt(np.sum(eta * eta)))
            d1 = np.sqrt(np.sum((grad + s * eta) ** 2, axis=(-2, -1)))
            d2 = np.sqrt(np.sum((grad - s * eta) ** 2, axis=(-2, -1)))
            level = np.minimum(d1, d2) <= tol
            norms = np.sqrt(np.sum(grad * grad, axis=(-2, -1)))
            sups.append(float(np.max(norms[level])))
        assert sups[1] == pytest.approx(2.0 * sups[0], rel=1e-9)


class TestBuildPatch:
    def test_worked_example_certificates(self, worked_patch):
        c = worked_patch.certificates
        assert c["div_residual"] <= 1e-8                      # (a)
        assert c["membership_expression"] < 0.0               # (b)
        assert c["membership_perturbed"] < 0.0
        assert c["rho0"] > 0.0
        assert c["omega_sup"] < 1e-2                          # (c)
        assert c["residual_integral"] < c["residual_threshold"]  # (d)
        assert c["slice_mean"] == 0.0                         # (e)
        assert c["phi_t_sup"] < 1e-2                          # (f)

    def test_preconditions(self, unit_box_2d):
        on_graph = ReducedPoint(p=np.array([1.0, 0.0]),
                                beta=sigma(np.array([1.0, 0.0])))
        with pytest.raises(ValueError, match="not strictly inside"):
            build_patch(on_graph, 0.1, unit_box_2d, 1e-2, 0.1, unit_box_2d)
        good = ReducedPoint(p=np.array([1.0, 0.0]), beta=np.array([0.3, 0.0]))
        with pytest.raises(ValueError):
            build_patch(good, 0.1, unit_box_2d, -1.0, 0.1, unit_box_2d)
        no_time = BoxDomain(intervals=((0.0, 1.0), (0.0, 1.0)))
        with pytest.raises(ValueError):
            build_patch(good, 0.1, no_time, 1e-2, 0.1, unit_box_2d)

    def test_zero_box_identity(self):
        target = ReducedPoint(p=np.array([1.0, 0.0]), beta=np.array([0.3, 0.0]))
        box = BoxDomain(intervals=((0.0, 1.0), (0.0, 1.0)), time=(0.0, 1.0))
        patch = build_patch(target, 0.1, None, 1e-2, 0.1, box)
        assert patch.is_empty
        X = np.random.default_rng(0).uniform(0, 1, (20, 2))
        t = np.full(20, 0.5)
        assert np.all(patch.phi(X, t) == 0.0)
        assert np.all(patch.psi(X, t) == 0.0)
        assert np.all(patch.grad_omega(X, t) == 0.0)

    def test_one_dimensional_state_and_seeds(self):
        # supercritical 1D state strictly inside the mid band
        target = ReducedPoint(p=np.array([2.0]), beta=np.array([0.357]))
        box = BoxDomain(intervals=((0.0, 1.0),), time=(0.0, 1.0))
        p0 = build_patch(target, DELTA_M2, box, 1e-2, 0.05, box, seed=0)
        p1 = build_patch(target, DELTA_M2, box, 1e-2, 0.05, box, seed=0)
        p2 = build_patch(target, DELTA_M2, box, 1e-2, 0.05, box, seed=4)
        c = p0.certificates
        assert c["membership_expression"] < 0.0
        assert c["residual_integral"] < c["residual_threshold"]
        x = np.linspace(0.2, 0.8, 5001)[:, None]
        t = np.full(5001, 0.5)
        assert np.array_equal(p0.phi(x, t), p1.phi(x, t))
        assert np.max(np.abs(p0.phi(x, t) - p2.phi(x, t))) > 0.0

    def test_serialization_round_trip(self, worked_patch):
        d = worked_patch.to_dict()
        assert d["empty"] is False
        assert len(d["frame"]["q"]) == 2
        assert d["profile"]["tau"] > 0.0
        assert d["certificates"]["residual_integral"] < 0.1
        e = empty_patch().to_dict()
        assert e["empty"] is True
