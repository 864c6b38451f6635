import numpy as np
import pytest

from conftest import FIXTURES, load_json, make_context
from eqrestore.denoiser import Denoiser, GmmDenoiser, ZeroDenoiser, load_denoiser
from eqrestore.errors import InvalidArgumentError
from eqrestore.io import read_mask
from eqrestore.operators import (DownsampleOperator, GrayscaleOperator, IdentityOperator, MaskOperator,
                                 stripe_mask)
from eqrestore.sampler import (DegradedObservation, SamplerContext, apply_F, apply_F_vjp, make_state,
                               project, residual_g, sequential_sample, sequential_step, x0_predict)
from eqrestore.schedule import build_schedule, select_timesteps


class OracleNoise(Denoiser):
    kind = "oracle"

    def __init__(self, eps):
        self.value = eps

    def eps(self, x, abar):
        return self.value


def context(op, denoiser, y, T=5, eta=0.0, workers=1):
    sched = build_schedule()
    return SamplerContext.build(sched, select_timesteps(sched, T), DegradedObservation(y, op), denoiser,
                                eta=eta, workers=workers)


def test_x0_predict_zero_denoiser():
    x = np.array([0.5, -1.0])
    assert np.allclose(x0_predict(x, 0.25, ZeroDenoiser()), x / 0.5)


def test_x0_predict_oracle_noise_recovers_clean():
    rng = np.random.default_rng(0)
    x0, e = rng.standard_normal(4), rng.standard_normal(4)
    a = 0.3
    xt = np.sqrt(a) * x0 + np.sqrt(1 - a) * e
    assert np.allclose(x0_predict(xt, a, OracleNoise(e)), x0, atol=1e-14)


def test_x0_predict_unit_gaussian():
    from eqrestore.denoiser import GmmParams
    d = GmmDenoiser(GmmParams(np.ones(1), np.zeros((1, 3)), np.ones((1, 3))))
    x = np.array([1.0, 2.0, -3.0])
    assert np.allclose(x0_predict(x, 0.4, d), np.sqrt(0.4) * x, atol=1e-14)


def test_project_examples():
    op = MaskOperator(np.array([[[1, 0, 1]]]))
    obs = DegradedObservation(np.array([5.0, 9.0]), op)
    assert project(np.array([[[1.0, 2.0, 3.0]]]), obs).reshape(-1).tolist() == [5.0, 2.0, 9.0]
    assert project(np.zeros((1, 1, 3)), obs).reshape(-1).tolist() == [5.0, 0.0, 9.0]
    x = np.array([[[4.0, 1.0, 6.0]]])
    obs2 = DegradedObservation(op.apply(x), op)
    assert np.array_equal(project(x, obs2), x)


def test_identity_zero_denoiser_rollout_reaches_ground_truth():
    x_gt = np.linspace(-1, 1, 6).reshape(1, 2, 3)
    ctx = context(IdentityOperator(x_gt.shape), ZeroDenoiser(), x_gt, T=4)
    state = make_state(x_gt.shape, 4, 3)
    x0, traj = sequential_sample(ctx, state)
    abar = ctx.coeffs.abar
    for k in range(4):
        assert np.allclose(traj[k], np.sqrt(abar[3 - k]) * x_gt, atol=1e-14)
    assert np.allclose(x0, x_gt, atol=1e-14)


def test_final_step_returns_projected_estimate():
    # abar_0 = 1, so the s = 1 step outputs the projected clean estimate with no noise terms
    op = DownsampleOperator((1, 4, 4), 2)
    gmm_ctx = context(op, ZeroDenoiser(), np.ones((1, 2, 2)), T=3, eta=0.5)
    x1 = np.random.default_rng(0).standard_normal((1, 4, 4))
    out = sequential_step(x1, 1, gmm_ctx, np.random.default_rng(1).standard_normal((1, 4, 4)))
    a = gmm_ctx.coeffs.abar[1]
    assert np.allclose(out, project(x1 / np.sqrt(a), gmm_ctx.obs), atol=1e-14)


def test_pinned_first_step_and_trajectory():
    exp = load_json("chain_expected.json")
    op = MaskOperator(read_mask(FIXTURES / "mask_small.pgm"), channels=1)
    obs = DegradedObservation.from_clean(np.array(exp["x_gt"]), op)
    assert np.array_equal(obs.y, np.array(exp["y"]))
    sched = build_schedule()
    ctx = SamplerContext.build(sched, select_timesteps(sched, exp["T"]), obs,
                               load_denoiser(FIXTURES / "gmm_small.json"), eta=exp["eta"])
    state = make_state((1, 4, 4), exp["T"], exp["seed"])
    first = sequential_step(state.x_T, exp["T"], ctx, state.noises[exp["T"] - 1])
    assert np.max(np.abs(first - np.array(exp["first_step"]))) <= 1e-12
    x0, traj = sequential_sample(ctx, state)
    assert traj.shape == (exp["T"], 1, 4, 4)
    assert np.max(np.abs(traj - np.array(exp["trajectory"]))) <= 1e-12
    assert np.max(np.abs(x0 - np.array(exp["x0"]))) <= 1e-12


def test_single_step_plan(gmm_small):
    gmm, x = gmm_small
    ctx = make_context(GrayscaleOperator(x.shape), gmm, x, T=1)
    state = make_state(x.shape, 1, 0)
    x0, traj = sequential_sample(ctx, state)
    assert traj.shape == (1,) + x.shape
    assert np.allclose(apply_F(state, ctx)[0], x0, atol=1e-14)


@pytest.mark.parametrize("eta", [0.0, 0.15])
def test_sequential_trajectory_is_fixed_point(gmm_small, eta):
    gmm, x = gmm_small
    for op in (GrayscaleOperator(x.shape), DownsampleOperator(x.shape, 2), MaskOperator(stripe_mask(8, 8), 3)):
        ctx = make_context(op, gmm, x, T=6, eta=eta)
        state = make_state(x.shape, 6, 9)
        _, traj = sequential_sample(ctx, state)
        assert np.max(np.abs(residual_g(state.with_states(traj), ctx))) <= 1e-8


def test_identity_operator_rows_are_data_terms(gmm_small):
    # with A = I the projector terms vanish and row x_j is exactly z_{j+1}
    gmm, x = gmm_small
    ctx = make_context(IdentityOperator(x.shape), gmm, x, T=4, eta=0.15)
    state = make_state(x.shape, 4, 2)
    out = apply_F(state, ctx)
    c = ctx.coeffs
    den = GmmDenoiser(gmm)
    for k in range(4):
        j = 3 - k
        e = den.eps(state.x_T, c.abar[j + 1])       # every chain input is still x_T
        z = c.c2[j + 1] * e + np.sqrt(c.abar[j]) * x + c.c1[j + 1] * state.noises[j]
        assert np.allclose(out[k], z, atol=1e-13)


def test_residual_definition(gmm_small):
    gmm, x = gmm_small
    ctx = make_context(GrayscaleOperator(x.shape), gmm, x, T=3)
    state = make_state(x.shape, 3, 0, init=np.zeros(x.shape))
    assert np.array_equal(residual_g(state, ctx), apply_F(state, ctx))


def test_apply_F_independent_of_worker_count(gmm_small):
    gmm, x = gmm_small
    outs = []
    for workers in (1, 4):
        ctx = make_context(DownsampleOperator(x.shape, 2), gmm, x, T=6, eta=0.15, workers=workers)
        state = make_state(x.shape, 6, 1)
        outs.append(apply_F(state, ctx))
        ctx.close()
    assert np.array_equal(outs[0], outs[1])


def test_apply_F_vjp_matches_dense_jacobian():
    from eqrestore.denoiser import random_gmm
    shape = (1, 2, 2)
    gmm = random_gmm(shape, 2, seed=3, variance=0.2, smooth=False)
    x = gmm.sample(np.random.default_rng(0))[0]
    ctx = make_context(DownsampleOperator(shape, 2), gmm, x, T=3, eta=0.15)
    state = make_state(shape, 3, 4)
    rng = np.random.default_rng(5)
    cot = rng.standard_normal(state.states.shape)
    d_states, d_xT = apply_F_vjp(state, ctx, cot)
    h = 1e-6
    for _ in range(4):
        v = rng.standard_normal(state.states.shape)
        hi = apply_F(state.with_states(state.states + h * v), ctx)
        lo = apply_F(state.with_states(state.states - h * v), ctx)
        assert np.vdot(cot, (hi - lo) / (2 * h)) == pytest.approx(np.vdot(d_states, v), rel=1e-6, abs=1e-8)
        w = rng.standard_normal(shape)
        from eqrestore.sampler import SamplingState
        hi = apply_F(SamplingState(state.states, state.x_T + h * w, state.noises, 0), ctx)
        lo = apply_F(SamplingState(state.states, state.x_T - h * w, state.noises, 0), ctx)
        assert np.vdot(cot, (hi - lo) / (2 * h)) == pytest.approx(np.vdot(d_xT, w), rel=1e-6, abs=1e-8)


def test_make_state_draw_order_and_warm_start():
    s = make_state((2, 3), 4, 5)
    rng = np.random.default_rng(5)
    assert np.array_equal(s.x_T, rng.standard_normal((2, 3)))
    assert np.array_equal(s.noises, rng.standard_normal((4, 2, 3)))
    assert np.array_equal(s.states, np.broadcast_to(s.x_T, (4, 2, 3)))
    w = make_state((2, 3), 4, 5, init=np.ones((2, 3)))
    assert np.array_equal(w.states, np.ones((4, 2, 3)))
    with pytest.raises(InvalidArgumentError):
        make_state((2, 3), 4, 5, init=np.ones((3, 2, 3)))


def test_sequential_step_rejects_bad_index(gmm_small):
    gmm, x = gmm_small
    ctx = make_context(GrayscaleOperator(x.shape), gmm, x, T=2)
    with pytest.raises(InvalidArgumentError):
        sequential_step(x, 3, ctx, np.zeros(x.shape))
