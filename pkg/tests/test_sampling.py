import numpy as np
import pytest

from tsdiffusion.data import MaskSpec, gen_masks
from tsdiffusion.denoiser import DenoiserConfig, init_params
from tsdiffusion.gradcheck import numerical_gradient, relative_error
from tsdiffusion.schedule import cosine_schedule, posterior_mean, respace
from tsdiffusion.tensor import Tensor
from tsdiffusion.sampling import (
    ConditionSpec,
    SampleRequest,
    budgeted_grad_steps,
    default_grad_steps,
    guidance_gradient,
    guided_x0,
    replace_observed,
    respaced,
    run_request,
    sample_conditional,
    sample_unconditional,
)

CFG = DenoiserConfig(seq_len=8, n_channels=2, n_heads=1, head_dim=8, enc_layers=1, dec_layers=1, top_k=2, timesteps=6)


class ConstantModel:
    """Denoiser stub whose clean-signal estimate is a fixed window."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.cfg = CFG

    def x0(self, xt, t):
        return Tensor(np.broadcast_to(self.value, np.shape(xt.data)).copy())


@pytest.fixture(scope="module")
def model():
    return init_params(CFG, 0)


@pytest.fixture(scope="module")
def sched():
    return cosine_schedule(CFG.timesteps)


def condition(rng, n=3, **kw):
    mask = gen_masks(MaskSpec("geometric", 0.5, mean_missing_length=2), n, 8, 2, rng)
    return ConditionSpec(mask, rng.uniform(size=(n, 8, 2)), **kw)


class TestGradSteps:
    def test_thirds(self):
        k = default_grad_steps(9)
        assert k[0] == 0
        assert list(k[1:]) == [1, 1, 1, 2, 2, 2, 3, 3, 3]

    def test_budget_counts_from_the_top(self):
        k = budgeted_grad_steps(default_grad_steps(9), 10)
        assert k.sum() == 10
        assert list(k[1:]) == [0, 0, 0, 0, 0, 1, 3, 3, 3]

    def test_no_budget(self):
        np.testing.assert_array_equal(budgeted_grad_steps(default_grad_steps(6), None), default_grad_steps(6))

    def test_condition_steps_length(self, rng):
        cond = condition(rng, grad_steps=np.ones(4, dtype=int))
        with pytest.raises(ValueError):
            cond.steps_for(6)


class TestConditionSpec:
    def test_zeroes_unobserved(self, rng):
        mask = np.zeros((8, 2), dtype=bool)
        mask[0] = True
        x_a = np.full((8, 2), np.nan)
        x_a[0] = 1.0
        cond = ConditionSpec(mask, x_a)
        assert np.isfinite(cond.x_a).all()
        assert cond.x_a[1:].sum() == 0.0

    @pytest.mark.parametrize("kw", [{"eta": -1.0}, {"gamma": -0.1}, {"budget": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ConditionSpec(np.ones((8, 2), bool), np.zeros((8, 2)), **kw)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ConditionSpec(np.ones((8, 2), bool), np.zeros((8, 3)))

    def test_nonfinite_observation(self):
        x = np.zeros((8, 2))
        x[2, 1] = np.inf
        with pytest.raises(ValueError):
            ConditionSpec(np.ones((8, 2), bool), x)


class TestReplace:
    def test_final_step_is_exact(self, rng, sched):
        mask = rng.random((8, 2)) < 0.5
        x_a = rng.normal(size=(8, 2))
        prev = rng.normal(size=(8, 2))
        out = replace_observed(x_a, mask, prev, 1, rng.normal(size=(8, 2)), sched)
        np.testing.assert_array_equal(out[mask], x_a[mask])
        np.testing.assert_array_equal(out[~mask], prev[~mask])

    def test_noise_level_of_previous_step(self, rng, sched):
        t = 4
        x_a = np.full((200_000, 1), 0.7)
        mask = np.ones_like(x_a, dtype=bool)
        out = replace_observed(x_a, mask, np.zeros_like(x_a), t, rng.normal(size=x_a.shape), sched)
        abar = np.prod(1.0 - sched.beta[1:t])
        assert out.mean() == pytest.approx(np.sqrt(abar) * 0.7, abs=5 * np.sqrt((1 - abar) / len(out)))
        assert out.var() == pytest.approx(1 - abar, rel=0.02)


class TestGuidance:
    def test_gradient_matches_finite_differences(self, rng, model, sched):
        cond = condition(rng, n=2, gamma=0.3)
        x = rng.normal(size=(2, 8, 2))
        z = rng.normal(size=x.shape)
        t = 4
        grad, _ = guidance_gradient(model, x, t, cond, sched, z)

        xt = Tensor(x.copy())

        def loss():
            # the candidate is a constant during differentiation: freeze it at the unperturbed point
            x0hat = model.x0(xt, np.full(2, t))
            l1 = (((x0hat.data - cond.x_a) * cond.mask) ** 2).sum()
            mu = posterior_mean(x0hat.data, xt.data, t, sched)
            return Tensor(l1 + cond.gamma * ((cand - mu) ** 2).sum() / sched.post_var[t])

        x0hat0 = model.x0(Tensor(x), np.full(2, t)).data
        cand = posterior_mean(x0hat0, x, t, sched) + np.sqrt(sched.post_var[t]) * z
        num = numerical_gradient(loss, xt, step=1e-6)
        assert relative_error(grad, num) < 1e-5

    def test_fluency_term_dropped_at_first_step(self, rng, model, sched):
        cond_a = condition(rng, n=1, gamma=0.0)
        cond_b = ConditionSpec(cond_a.mask, cond_a.x_a, gamma=5.0)
        x = rng.normal(size=(1, 8, 2))
        z = rng.normal(size=x.shape)
        ga, _ = guidance_gradient(model, x, 1, cond_a, sched, z)
        gb, _ = guidance_gradient(model, x, 1, cond_b, sched, z)
        np.testing.assert_array_equal(ga, gb)

    def test_guided_estimate(self, rng, model, sched):
        cond = condition(rng, n=2, eta=0.2)
        x = rng.normal(size=(2, 8, 2))
        z = rng.normal(size=x.shape)
        tilde, x0hat = guided_x0(x, 3, cond, model, sched, z)
        grad, _ = guidance_gradient(model, x, 3, cond, sched, z)
        np.testing.assert_allclose(tilde, x0hat - 0.2 * grad, atol=1e-14)

    def test_descent_reduces_reconstruction_error(self, rng, model, sched):
        cond = condition(rng, n=4, eta=1e-3, gamma=0.0)
        x = rng.normal(size=(4, 8, 2))
        grad, x0hat = guidance_gradient(model, x, 2, cond, sched, np.zeros_like(x))
        after = model.x0(Tensor(x - cond.eta * grad), np.full(4, 2)).data
        err = lambda y: (((y - cond.x_a) * cond.mask) ** 2).sum()  # noqa: E731
        assert err(after) < err(x0hat)


class TestConditional:
    @pytest.mark.parametrize("mode", ["guided", "replace-only"])
    def test_observed_coordinates_exact(self, rng, model, sched, mode):
        cond = condition(rng, n=3, eta=0.1)
        out = sample_conditional(model, sched, cond, seed=5, mode=mode)
        np.testing.assert_array_equal(out[cond.mask], cond.x_a[cond.mask])

    def test_zero_eta_matches_replace_only(self, rng, model, sched):
        cond = condition(rng, n=3, eta=0.0, grad_steps=np.r_[0, np.ones(CFG.timesteps, dtype=int)])
        a = sample_conditional(model, sched, cond, seed=11, mode="guided")
        b = sample_conditional(model, sched, cond, seed=11, mode="replace-only")
        np.testing.assert_array_equal(a, b)

    def test_guidance_changes_output(self, rng, model, sched):
        cond = condition(rng, n=2, eta=0.5)
        a = sample_conditional(model, sched, cond, seed=1, mode="guided")
        b = sample_conditional(model, sched, cond, seed=1, mode="replace-only")
        assert not np.array_equal(a[~cond.mask], b[~cond.mask])

    def test_deterministic(self, rng, model, sched):
        cond = condition(rng, n=2)
        np.testing.assert_array_equal(
            sample_conditional(model, sched, cond, seed=3), sample_conditional(model, sched, cond, seed=3)
        )

    def test_single_window_broadcast(self, rng, model, sched):
        cond = condition(rng, n=1)
        single = ConditionSpec(cond.mask[0], cond.x_a[0])
        out = sample_conditional(model, sched, single, n=4, seed=0)
        assert out.shape == (4, 8, 2)
        with pytest.raises(ValueError):
            sample_conditional(model, sched, single, seed=0)

    def test_fully_observed_returns_input(self, rng, model, sched):
        x = rng.uniform(size=(2, 8, 2))
        cond = ConditionSpec(np.ones_like(x, dtype=bool), x)
        np.testing.assert_array_equal(sample_conditional(model, sched, cond, seed=0), x)

    def test_window_mismatch(self, rng, model, sched):
        cond = ConditionSpec(np.ones((1, 9, 2), bool), np.zeros((1, 9, 2)))
        with pytest.raises(ValueError):
            sample_conditional(model, sched, cond)

    def test_unknown_mode(self, rng, model, sched):
        with pytest.raises(ValueError):
            sample_conditional(model, sched, condition(rng), mode="magic")


class TestUnconditional:
    def test_exact_estimate_lands_on_it(self, rng, sched):
        target = rng.uniform(size=(8, 2))
        out = sample_unconditional(ConstantModel(target), sched, 5, seed=0)
        np.testing.assert_allclose(out, np.broadcast_to(target, out.shape), atol=1e-12)

    def test_shape_and_determinism(self, model, sched):
        a = sample_unconditional(model, sched, 5, seed=2, chunk_size=2)
        assert a.shape == (5, 8, 2)
        np.testing.assert_array_equal(a, sample_unconditional(model, sched, 5, seed=2, chunk_size=2))

    def test_chunks_are_independent(self, model, sched):
        a = sample_unconditional(model, sched, 4, seed=2, chunk_size=2)
        b = sample_unconditional(model, sched, 2, seed=2, chunk_size=2)
        np.testing.assert_array_equal(a[:2], b)

    def test_request_dispatch(self, rng, model, sched):
        req = SampleRequest(3, seed=4)
        np.testing.assert_array_equal(run_request(model, sched, req), sample_unconditional(model, sched, 3, 4))
        cond = condition(rng, n=3)
        req = SampleRequest(3, seed=4, condition=cond, mode="replace-only")
        np.testing.assert_array_equal(
            run_request(model, sched, req), sample_conditional(model, sched, cond, 3, 4, "replace-only")
        )

    @pytest.mark.parametrize("kw", [{"mode": "guided"}, {"mode": "x"}, {"n_samples": 0}])
    def test_request_validation(self, kw):
        with pytest.raises(ValueError):
            SampleRequest(**{"n_samples": 2, **kw})


class TestRespacing:
    def test_visited_steps_keep_noise_levels(self):
        full = cosine_schedule(100)
        short, steps = respace(full, 20)
        assert short.T == 20 and steps[0] == 0 and steps[-1] == 100
        # the last step is capped at the original largest beta
        np.testing.assert_allclose(short.alpha_bar[:-1], full.alpha_bar[steps[:-1]], rtol=1e-12)
        assert short.alpha_bar[-1] < 1e-4

    def test_full_length_is_identity(self, model, sched):
        m, s = respaced(model, sched, None)
        assert m is model and s is sched
        m, s = respaced(model, sched, sched.T)
        assert s is sched

    def test_model_sees_original_steps(self, rng, sched):
        seen = []

        class Spy(ConstantModel):
            def x0(self, xt, t):
                seen.append(int(np.asarray(t)[0]))
                return super().x0(xt, t)

        target = rng.uniform(size=(8, 2))
        m, s = respaced(Spy(target), sched, 3)
        out = sample_unconditional(m, s, 2, seed=0)
        assert seen == [6, 4, 2]
        np.testing.assert_allclose(out, np.broadcast_to(target, out.shape), atol=1e-12)

    def test_invalid(self, sched):
        with pytest.raises(ValueError):
            respace(sched, sched.T + 1)


def test_default_eta_scales_with_window():
    assert ConditionSpec(np.ones((8, 2), bool), np.zeros((8, 2))).eta == pytest.approx(0.16)


class TestCenteredSpace:
    CENTERED = DenoiserConfig(**{**CFG.to_dict(), "centered": True})

    def stub(self, value):
        m = ConstantModel(value)
        m.cfg = self.CENTERED
        return m

    def test_outputs_are_decoded(self, rng, sched):
        target = rng.uniform(-1, 1, size=(8, 2))
        out = sample_unconditional(self.stub(target), sched, 3, seed=0)
        np.testing.assert_allclose(out, np.broadcast_to((target + 1) / 2, out.shape), atol=1e-12)

    def test_clip_bounds_the_estimate(self, sched):
        out = sample_unconditional(ConstantModel(5.0), sched, 2, seed=0, clip=(0.0, 1.0))
        np.testing.assert_allclose(out, 1.0, atol=1e-12)
        out = sample_unconditional(self.stub(-5.0), sched, 2, seed=0, clip=(0.0, 1.0))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_clip_inside_range_is_inert(self, rng, sched):
        target = rng.uniform(0.2, 0.8, size=(8, 2))
        a = sample_unconditional(ConstantModel(target), sched, 2, seed=0)
        b = sample_unconditional(ConstantModel(target), sched, 2, seed=0, clip=(0.0, 1.0))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("mode", ["guided", "replace-only"])
    def test_conditional_observations_exact(self, rng, sched, mode):
        model = init_params(self.CENTERED, 0)
        cond = condition(rng, eta=0.05)
        out = sample_conditional(model, sched, cond, seed=1, mode=mode, clip=(0.0, 1.0))
        np.testing.assert_array_equal(out[cond.mask], cond.x_a[cond.mask])

    def test_conditional_matches_encoded_plain_model(self, rng, sched):
        plain = init_params(CFG, 0)
        centered = init_params(self.CENTERED, 0)
        cond = condition(rng, eta=0.05)
        enc = ConditionSpec(cond.mask, 2 * cond.x_a - 1, cond.eta, cond.gamma, cond.grad_steps, cond.budget)
        a = sample_conditional(centered, sched, cond, seed=1)
        b = sample_conditional(plain, sched, enc, seed=1)
        np.testing.assert_allclose(a[~cond.mask], ((b + 1) / 2)[~cond.mask], atol=1e-12)

    @pytest.mark.parametrize("clip", [(1.0, 0.0), (0.5, 0.5)])
    def test_invalid_clip(self, sched, clip):
        with pytest.raises(ValueError):
            sample_unconditional(ConstantModel(0.0), sched, 1, seed=0, clip=clip)
