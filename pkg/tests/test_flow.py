import numpy as np
import pytest
from scipy import optimize, stats

from geoflow.errors import DivergenceError, StepSizeError
from geoflow.flow import (
    FlowConfig,
    extrapolate_limit,
    fibre_drift,
    integrate,
    vanishing_lambda_limit,
)
from geoflow.models import BilinearToy, Dataset, LinearToy, singleton_dataset
from geoflow.regularisers import RegKind, RegulariserSpec

THETA0_BILINEAR = np.array([2.0, 0.1])
Q_CONSERVED = 3.99  # theta1^2 - theta2^2 at the bilinear start point


def bilinear_flow_limit():
    """Closed-form interpolator selected by the conserved quantity."""
    t1_sq = (Q_CONSERVED + np.sqrt(Q_CONSERVED ** 2 + 4.0)) / 2.0
    t1 = np.sqrt(t1_sq)
    return np.array([t1, 1.0 / t1])


def min_norm_on_hyperbola(anchor):
    """1-D numeric minimisation of the anchored distance over theta1*theta2 = 1."""
    f = lambda t: (t - anchor[0]) ** 2 + (1.0 / t - anchor[1]) ** 2
    res = optimize.minimize_scalar(f, bounds=(0.3, 6.0), method="bounded",
                                   options={"xatol": 1e-13})
    return np.array([res.x, 1.0 / res.x])


class TestRidgelessRuns:
    def test_linear_symmetric_minimum_norm(self):
        cfg = FlowConfig(step_size=0.01, max_time=10.0, record_every=50)
        traj = integrate(LinearToy(), singleton_dataset(), np.zeros(2), None, 0.0, cfg)
        assert traj.converged and traj.stop_reason == "residual_tol"
        np.testing.assert_allclose(traj.theta_final, [0.5, 0.5], atol=1e-6)

    def test_linear_residual_log_slope(self):
        cfg = FlowConfig(step_size=0.005, max_time=6.0, record_every=10,
                         residual_tol=1e-9)
        traj = integrate(LinearToy(), singleton_dataset(), np.zeros(2), None, 0.0, cfg)
        pts = [(s.t, s.residual_norm) for s in traj.steps if 1e-7 < s.residual_norm < 0.5]
        t = np.array([p[0] for p in pts])
        slope = stats.linregress(t, np.log([p[1] for p in pts])).slope
        assert -4.05 <= slope <= -3.95

    def test_bilinear_conserved_quantity_and_limit(self):
        cfg = FlowConfig(step_size=0.005, max_time=12.0, record_every=10)
        traj = integrate(BilinearToy(), singleton_dataset(), THETA0_BILINEAR, None, 0.0, cfg)
        for s in traj.steps:
            assert abs(s.theta[0] ** 2 - s.theta[1] ** 2 - Q_CONSERVED) < 1e-6
        assert abs(traj.theta_final[0] * traj.theta_final[1] - 1.0) < 1e-5
        np.testing.assert_allclose(traj.theta_final, bilinear_flow_limit(), atol=1e-5)

    @pytest.mark.parametrize("model,theta0", [
        (LinearToy(), np.array([0.2, -0.4])),
        (BilinearToy(), THETA0_BILINEAR),
    ])
    def test_loss_monotone_nonincreasing(self, model, theta0):
        cfg = FlowConfig(step_size=0.01, max_time=8.0, record_every=5)
        traj = integrate(model, singleton_dataset(), theta0, None, 0.0, cfg)
        losses = [s.loss for s in traj.steps]
        assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))

    def test_arc_length_bound_from_recorded_spectra(self):
        cfg = FlowConfig(step_size=0.005, max_time=12.0, record_every=10, spectral_every=10)
        traj = integrate(BilinearToy(), singleton_dataset(), THETA0_BILINEAR, None, 0.0, cfg)
        sigma_max = max(np.sqrt(s.lambda_max) for s in traj.steps if s.lambda_max is not None)
        c_sq = min(s.lambda_min for s in traj.steps if s.lambda_min is not None)
        r0 = traj.steps[0].residual_norm
        assert traj.total_arc_length <= 2.0 * (sigma_max / c_sq) * r0

    def test_step_halving_changes_final_below_1e5(self):
        data = singleton_dataset()
        out = []
        for h in (0.01, 0.005):
            cfg = FlowConfig(step_size=h, max_time=10.0, record_every=10 ** 9,
                             spectral_every=10 ** 9)
            out.append(integrate(BilinearToy(), data, THETA0_BILINEAR, None, 0.0, cfg).theta_final)
        assert np.linalg.norm(out[0] - out[1]) < 1e-5


class TestGuardsAndErrors:
    def test_stability_guard_warns_and_halves(self):
        cfg = FlowConfig(step_size=0.2, max_time=1.0, record_every=10 ** 9,
                         spectral_every=10 ** 9)
        with pytest.warns(RuntimeWarning, match="stability guard"):
            traj = integrate(BilinearToy(), singleton_dataset(), THETA0_BILINEAR, None, 0.0, cfg)
        assert traj.step_size == pytest.approx(0.1)

    def test_guard_exhaustion_raises(self):
        wide = Dataset(inputs=[[1e6]], targets=[1.0])
        with pytest.raises(StepSizeError):
            integrate(LinearToy(), wide, np.zeros(2), None, 0.0,
                      FlowConfig(step_size=0.01, max_time=1.0))

    def test_divergence_carries_last_good_step(self):
        class CubicRamp:
            num_params = 1
            constant_jacobian = False

            def outputs(self, th, data):
                return th[0] ** 3 * data.inputs[:, 0]

            def jacobian(self, th, data):
                return np.column_stack([3 * th[0] ** 2 * data.inputs[:, 0]])

            def vjp(self, th, data, w):
                return np.array([3 * th[0] ** 2 * float(np.dot(w, data.inputs[:, 0]))])

        cfg = FlowConfig(step_size=0.05, max_time=20.0, integrator="euler",
                         record_every=1, spectral_every=10 ** 9)
        with pytest.raises(DivergenceError) as err:
            integrate(CubicRamp(), Dataset(inputs=[[1.0]], targets=[8.0]),
                      np.array([0.5]), None, 0.0, cfg)
        assert err.value.last_step is not None
        assert np.all(np.isfinite(err.value.last_step.theta))

    def test_arc_requires_positive_lambda(self):
        reg = RegulariserSpec(kind=RegKind.ARC, anchor=THETA0_BILINEAR)
        with pytest.raises(ValueError, match="lam > 0"):
            integrate(BilinearToy(), singleton_dataset(), THETA0_BILINEAR, reg, 0.0,
                      FlowConfig())


class TestArcRuns:
    def arc_traj(self, lam, h=0.005):
        reg = RegulariserSpec(kind=RegKind.ARC, anchor=THETA0_BILINEAR)
        cfg = FlowConfig(step_size=h, max_time=50.0, record_every=1, spectral_every=10 ** 9)
        return integrate(BilinearToy(), singleton_dataset(), THETA0_BILINEAR, reg, lam, cfg)

    def test_stops_with_balance_condition(self):
        traj = self.arc_traj(0.01)
        assert traj.stop_reason == "arc_stop"
        info = traj.arc_stop
        assert info.balance_gap < 0.05 * info.grad_norm_star

    def test_points_are_prefix_of_ridgeless_run(self):
        lam = 0.01
        arc = self.arc_traj(lam)
        cfg = FlowConfig(step_size=0.005, max_time=50.0, record_every=1,
                         spectral_every=10 ** 9)
        base = integrate(BilinearToy(), singleton_dataset(), THETA0_BILINEAR, None, 0.0, cfg)
        # every arc step except the interpolated stop coincides with the base run
        for s_arc, s_base in zip(arc.steps[:-1], base.steps):
            assert np.linalg.norm(s_arc.theta - s_base.theta) < 1e-8

    def test_post_convergence_drift_below_tolerance(self):
        for lam in (1e-3, 1e-2):
            traj = self.arc_traj(lam)
            drift = fibre_drift(BilinearToy(), singleton_dataset(), traj, 2.5e-3)
            assert drift.reached_threshold
            assert max(d for _, d in drift.points) < 1e-6


class TestFibreDrift:
    def test_anchored_bilinear_drifts_along_fibre(self):
        reg = RegulariserSpec(kind=RegKind.ANCHORED, anchor=THETA0_BILINEAR)
        cfg = FlowConfig(step_size=0.02, max_time=400.0, record_every=100,
                         spectral_every=10 ** 9)
        traj = integrate(BilinearToy(), singleton_dataset(), THETA0_BILINEAR, reg, 0.05, cfg)
        drift = fibre_drift(BilinearToy(), singleton_dataset(), traj, 0.05)
        assert drift.reached_threshold
        assert drift.points[-1][1] > 0.01

    def test_anchored_linear_stays_on_plane(self):
        theta0 = np.array([0.2, -0.4])
        reg = RegulariserSpec(kind=RegKind.ANCHORED, anchor=theta0)
        cfg = FlowConfig(step_size=0.02, max_time=200.0, record_every=50,
                         spectral_every=10 ** 9)
        traj = integrate(LinearToy(), singleton_dataset(), theta0, reg, 0.05, cfg)
        drift = fibre_drift(LinearToy(), singleton_dataset(), traj, 0.05)
        assert drift.reached_threshold
        assert max(d for _, d in drift.points) < 1e-6

    def test_unreached_threshold_flagged(self):
        cfg = FlowConfig(step_size=0.01, max_time=0.05, record_every=1,
                         spectral_every=10 ** 9)
        traj = integrate(BilinearToy(), singleton_dataset(), THETA0_BILINEAR, None, 0.0, cfg)
        drift = fibre_drift(BilinearToy(), singleton_dataset(), traj, 1e-9)
        assert not drift.reached_threshold and drift.points == []


EQ_CFG = FlowConfig(step_size=0.05, max_time=400.0, record_every=10 ** 9,
                    spectral_every=10 ** 9)


class TestVanishingLambdaLimit:
    def test_bilinear_anchored_converges_to_min_norm_point(self):
        reg = RegulariserSpec(kind=RegKind.ANCHORED, anchor=THETA0_BILINEAR)
        limits = vanishing_lambda_limit(BilinearToy(), singleton_dataset(),
                                        THETA0_BILINEAR, reg,
                                        [0.1, 0.05, 0.02, 0.01], EQ_CFG)
        assert all(l.converged for l in limits)
        oracle = min_norm_on_hyperbola(THETA0_BILINEAR)
        dists = [np.linalg.norm(l.theta - oracle) for l in limits]
        assert all(b < a for a, b in zip(dists, dists[1:]))
        extrap = extrapolate_limit(limits)
        assert np.linalg.norm(extrap - oracle) < 1e-3
        assert np.linalg.norm(extrap - bilinear_flow_limit()) > 0.01

    def test_linear_anchored_unbiased_from_origin(self):
        reg = RegulariserSpec(kind=RegKind.ANCHORED, anchor=np.zeros(2))
        limits = vanishing_lambda_limit(LinearToy(), singleton_dataset(), np.zeros(2),
                                        reg, [0.1, 0.05, 0.025], EQ_CFG)
        extrap = extrapolate_limit(limits)
        np.testing.assert_allclose(extrap, [0.5, 0.5], atol=1e-4)

    def test_quadratic_family_with_zero_B_matches_anchored(self):
        anch = RegulariserSpec(kind=RegKind.ANCHORED, anchor=THETA0_BILINEAR)
        quad = RegulariserSpec(kind=RegKind.QUADRATIC_AB, anchor=THETA0_BILINEAR,
                               a=1.0, B=np.zeros((1, 1)))
        kw = dict(cfg=EQ_CFG)
        la = vanishing_lambda_limit(BilinearToy(), singleton_dataset(),
                                    THETA0_BILINEAR, anch, [0.05, 0.02], **kw)
        lq = vanishing_lambda_limit(BilinearToy(), singleton_dataset(),
                                    THETA0_BILINEAR, quad, [0.05, 0.02], **kw)
        for a, q in zip(la, lq):
            np.testing.assert_allclose(a.theta, q.theta, atol=1e-10)

    def test_rejects_bad_schedule_and_arc(self):
        reg = RegulariserSpec(kind=RegKind.ANCHORED, anchor=np.zeros(2))
        with pytest.raises(ValueError, match="decreasing"):
            vanishing_lambda_limit(LinearToy(), singleton_dataset(), np.zeros(2),
                                   reg, [0.01, 0.1], EQ_CFG)
        arc = RegulariserSpec(kind=RegKind.ARC, anchor=np.zeros(2))
        with pytest.raises(ValueError, match="arc"):
            vanishing_lambda_limit(LinearToy(), singleton_dataset(), np.zeros(2),
                                   arc, [0.1, 0.05], EQ_CFG)
