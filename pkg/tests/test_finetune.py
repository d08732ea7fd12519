from dataclasses import replace

import numpy as np
import pytest

from conftest import SMALL, finite_difference_check
from diffplan import denoiser, finetune, rollout, tasks
from diffplan.diffusion import sample_action_sequence
from diffplan.errors import BufferEmptyError, NotFinetunableError
from diffplan.finetune import (
    ProficiencyRule,
    RewardNormalizer,
    TargetBuffer,
    TraceBatch,
    clipped_pg_loss,
    discounted_sum,
    importance_ratio,
    kl_loss,
    mdp_rewards,
    mdp_transitions,
    regularizer_loss,
    reinforce_grad,
)
from diffplan.rollout import Episode, RolloutSegment
from diffplan.schedule import ddim_subsequence, with_variance_floor, with_x0_clip


def make_segments(params, schedule, n=6, seed=0, steps=5, eta=1.0, min_std=0.1, clip=1.0):
    rng = np.random.default_rng(seed)
    plan = with_x0_clip(with_variance_floor(ddim_subsequence(schedule, steps, eta), min_std), clip)
    s = rng.standard_normal((n, SMALL.T_o, SMALL.S))
    _, traces = sample_action_sequence(params, s, schedule, plan, rng, record=True)
    rewards = rng.standard_normal(n)
    return [
        RolloutSegment(s_hist=s[i], trace=traces[i], seg_reward=float(rewards[i]), t=0, episode_id=i)
        for i in range(n)
    ], rewards


def perturbed(params, scale, seed=1):
    rng = np.random.default_rng(seed)
    out = params.copy()
    for a in out.arrays:
        a += scale * rng.standard_normal(a.shape)
    return out


# -- segment rewards and the denoising decision process -------------------------------


class _ScriptedRewards:
    """Replaces the environment step so episodes emit a fixed reward list."""

    def __init__(self, rewards):
        self.rewards = rewards

    def __call__(self, state, action):
        r = self.rewards[state.t]
        t = state.t + 1
        done = t >= len(self.rewards)
        return replace(state, t=t, done=done), r, done, False


def _run(monkeypatch, rewards, T_a, gamma):
    monkeypatch.setattr(tasks, "step", _ScriptedRewards(rewards))
    spec = tasks.TaskSpec("reach", S=4, dynamics="point", reward="distance", L=len(rewards))
    planner = rollout.RandomPlanner(H=8, T_o=2, S=4)
    (ep,) = rollout.run_episodes(planner, spec, [0], np.random.default_rng(0), T_a=T_a, gamma=gamma)
    return ep


def test_segment_reward_undiscounted(monkeypatch):
    ep = _run(monkeypatch, [1.0, 2.0, 3.0], T_a=3, gamma=1.0)
    assert len(ep.segments) == 1
    assert ep.segments[0].seg_reward == 6.0


def test_segment_reward_discounted(monkeypatch):
    ep = _run(monkeypatch, [1.0, 2.0, 3.0], T_a=3, gamma=0.9)
    assert ep.segments[0].seg_reward == pytest.approx(5.23, abs=1e-12)
    assert discounted_sum([1, 2, 3], 0.9) == pytest.approx(5.23, abs=1e-12)


def test_segment_truncated_at_episode_end(monkeypatch):
    ep = _run(monkeypatch, [4.0], T_a=8, gamma=1.0)
    assert ep.length == 1
    assert ep.segments[0].seg_reward == 4.0
    assert ep.segments[0].rewards == [4.0]


def test_mdp_return_equals_segment_reward(small_params, schedule):
    segs, _ = make_segments(small_params, schedule, n=20)
    for seg in segs:
        r = mdp_rewards(seg)
        assert np.all(r[:-1] == 0)
        assert float(np.sum(r)) == seg.seg_reward
        transitions = list(mdp_transitions(seg))
        assert len(transitions) == len(seg.trace)
        # the MDP state after step i is the next step's input
        for (state, a_out, _), (nxt, _, _) in zip(transitions, transitions[1:]):
            np.testing.assert_array_equal(a_out, nxt[1])


# -- importance ratios ---------------------------------------------------------------


def test_ratio_one_at_old_params(small_params, schedule):
    segs, _ = make_segments(small_params, schedule)
    for seg in segs:
        rho = importance_ratio(small_params, small_params, seg.trace, seg.s_hist)
        assert np.all(rho == 1.0)


def test_ratio_continuous_in_params(small_params, schedule):
    segs, _ = make_segments(small_params, schedule, n=2)
    seg = segs[0]
    devs = []
    for delta in (1e-3, 1e-4, 1e-5):
        rho = importance_ratio(perturbed(small_params, delta), small_params, seg.trace, seg.s_hist)
        devs.append(np.max(np.abs(rho - 1.0)))
    # first order in delta: shrinking delta tenfold shrinks the deviation about tenfold
    assert devs[1] / devs[0] == pytest.approx(0.1, rel=0.1)
    assert devs[2] / devs[1] == pytest.approx(0.1, rel=0.1)


def test_log_ratio_additive(small_params, schedule):
    segs, _ = make_segments(small_params, schedule, n=1)
    seg = segs[0]
    new = perturbed(small_params, 1e-2)
    rho = importance_ratio(new, small_params, seg.trace, seg.s_hist)
    batch = TraceBatch.from_segments([seg])
    lp_new, _, _ = finetune.replay_logprob(new, batch)
    lp_old, _, _ = finetune.replay_logprob(small_params, batch)
    assert np.sum(np.log(rho)) == pytest.approx(np.sum(lp_new) - np.sum(lp_old), rel=1e-10, abs=1e-12)


def test_deterministic_trace_rejected(small_params, schedule):
    segs, _ = make_segments(small_params, schedule, n=1, eta=0.0, min_std=0.0)
    with pytest.raises(NotFinetunableError):
        importance_ratio(small_params, small_params, segs[0].trace, segs[0].s_hist)
    with pytest.raises(NotFinetunableError):
        clipped_pg_loss(small_params, small_params, segs, [1.0], 0.2)


def test_cached_logp_matches_replay(small_params, schedule):
    segs, _ = make_segments(small_params, schedule)
    batch = TraceBatch.from_segments(segs)
    lp, _, _ = finetune.replay_logprob(small_params, batch)
    np.testing.assert_allclose(lp, batch.logp_old, rtol=0, atol=1e-10)


# -- clipped surrogate -----------------------------------------------------------------


def test_loss_at_old_params(small_params, schedule):
    segs, r = make_segments(small_params, schedule, steps=5)
    loss, _, stats = clipped_pg_loss(small_params, small_params, segs, r, 0.2)
    assert loss == pytest.approx(-np.mean(r) * 5, rel=1e-12)
    assert stats.mean_rho == 1.0 and stats.clip_fraction == 0.0


def test_gradient_at_old_params_equals_reinforce(small_params, schedule):
    segs, r = make_segments(small_params, schedule, n=8, steps=5)
    _, g_clip, _ = clipped_pg_loss(small_params, small_params, segs, r, 0.2)
    g_ref = reinforce_grad(small_params, segs, r)
    for a, b in zip(g_clip, g_ref):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10 * max(1.0, np.max(np.abs(b))))


def _single_step_segment(params, schedule):
    segs, _ = make_segments(params, schedule, n=1, steps=1, clip=0.0)
    return segs


@pytest.mark.parametrize("r_hat,rho,expected", [(1.0, 2.0, -1.2), (-1.0, 0.5, 0.8)])
def test_clip_arithmetic(small_params, schedule, r_hat, rho, expected):
    segs = _single_step_segment(small_params, schedule)
    loss, grads, stats = clipped_pg_loss(small_params, None, segs, [r_hat], 0.2, rho_override=np.array([rho]))
    assert loss == pytest.approx(expected, abs=1e-12)
    # the clipped branch is active, so no gradient flows
    assert all(np.all(g == 0) for g in grads)
    assert stats.clip_fraction == 1.0


def test_unclipped_branch_keeps_gradient(small_params, schedule):
    segs = _single_step_segment(small_params, schedule)
    loss, grads, _ = clipped_pg_loss(small_params, None, segs, [-1.0], 0.2, rho_override=np.array([2.0]))
    assert loss == pytest.approx(2.0, abs=1e-12)
    assert denoiser.grad_norm(grads) > 0


def test_pg_gradient_matches_finite_differences(small_params, schedule):
    segs, r = make_segments(small_params, schedule, n=4, steps=4)
    old = perturbed(small_params, 3e-3, seed=5)
    loss_fn = lambda p: clipped_pg_loss(p, old, segs, r, 0.2)[0]
    _, grads, stats = clipped_pg_loss(small_params, old, segs, r, 0.2)
    assert 0 < stats.clip_fraction < 1 or stats.clip_fraction == 0
    err = finite_difference_check(loss_fn, small_params, grads, np.random.default_rng(0))
    assert err <= 1e-4


def test_positive_rescaling_preserves_signs(small_params, schedule):
    segs, r = make_segments(small_params, schedule, n=5, steps=3)
    old = perturbed(small_params, 1e-2)
    batch = TraceBatch.from_segments(segs)
    lp, _, _ = finetune.replay_logprob(small_params, batch)
    lp_old, _, _ = finetune.replay_logprob(old, batch)
    rho = np.exp(lp - lp_old)
    signs = []
    for scale in (1.0, 3.7):
        rr = scale * r[batch.seg]
        contrib = -np.minimum(rho * rr, np.clip(rho, 0.8, 1.2) * rr)
        signs.append(np.sign(contrib))
    np.testing.assert_array_equal(signs[0], signs[1])


def test_pg_rejects_bad_inputs(small_params, schedule):
    segs, r = make_segments(small_params, schedule, n=3)
    with pytest.raises(ValueError):
        clipped_pg_loss(small_params, None, [], [], 0.2)
    with pytest.raises(ValueError):
        clipped_pg_loss(small_params, None, segs, r[:2], 0.2)


# -- regularizers ------------------------------------------------------------------------


def test_kl_zero_at_pretrained(small_params, schedule):
    segs, _ = make_segments(small_params, schedule)
    loss, grads = kl_loss(small_params, small_params, TraceBatch.from_segments(segs))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_none_regularizer_is_zero(small_params, schedule):
    segs, _ = make_segments(small_params, schedule)
    loss, grads = regularizer_loss(small_params, small_params, "none", segs, None, schedule, np.random.default_rng(0))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_unknown_regularizer(small_params, schedule):
    segs, _ = make_segments(small_params, schedule)
    with pytest.raises(ValueError):
        regularizer_loss(small_params, small_params, "l2", segs, None, schedule, np.random.default_rng(0))


def test_bc_needs_target(small_params, schedule):
    segs, _ = make_segments(small_params, schedule)
    with pytest.raises(BufferEmptyError):
        regularizer_loss(small_params, small_params, "bc", segs, TargetBuffer(3), schedule, np.random.default_rng(0))


def _episode(segs, ret, success, eid=0):
    return Episode(eid, segs, ret, success, [], [], [])


@pytest.mark.parametrize("kind", ["bc", "kl", "pl"])
def test_regularizer_gradients_match_finite_differences(small_params, schedule, kind):
    segs, _ = make_segments(small_params, schedule, n=4, steps=4)
    target = TargetBuffer(5)
    target.admit(_episode(segs, 1.0, True))
    pre = perturbed(small_params, 1e-2, seed=3)

    def loss_fn(p):
        # the same rng seed replays the same (k, eps) draws
        return regularizer_loss(p, pre, kind, segs, target, schedule, np.random.default_rng(11), 16)[0]

    loss, grads = regularizer_loss(small_params, pre, kind, segs, target, schedule, np.random.default_rng(11), 16)
    assert loss >= 0
    err = finite_difference_check(loss_fn, small_params, grads, np.random.default_rng(1))
    assert err <= 1e-4


def test_bc_regularizer_uses_stored_histories(small_params, schedule):
    segs, _ = make_segments(small_params, schedule, n=3)
    target = TargetBuffer(2)
    target.admit(_episode(segs, 0.0, True))
    s, a0 = target.sample(50, np.random.default_rng(0))
    stored = {(seg.s_hist.tobytes(), seg.a0.tobytes()) for seg in segs}
    assert all((s[i].tobytes(), a0[i].tobytes()) in stored for i in range(50))


def test_bc_near_floor_on_own_outputs(schedule):
    """BC on the planner's own samples sits at the loss it already achieves on them."""
    cfg = denoiser.DenoiserConfig(H=4, A=2, T_o=1, S=2, E=8, hidden=(32, 32))
    params = denoiser.init_params(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    data = rng.uniform(-0.5, 0.5, (16, 4, 2))
    s = rng.standard_normal((16, 1, 2))
    state = denoiser.AdamState.fresh(params)
    from diffplan.diffusion import bc_loss_batch, denoise_loss_batch

    for _ in range(1500):
        _, g = denoise_loss_batch(params, s, data, schedule, rng)
        params, state = denoiser.adam_update(params, g, state, 2e-3)
    floor = np.mean([denoise_loss_batch(params, s, data, schedule, np.random.default_rng(i))[0] for i in range(40)])
    plan = with_x0_clip(ddim_subsequence(schedule, 10, 1.0), 1.0)
    own, _ = sample_action_sequence(params, s, schedule, plan, np.random.default_rng(2))
    bc = np.mean([bc_loss_batch(params, s, own, schedule, np.random.default_rng(i))[0] for i in range(40)])
    init = np.mean([bc_loss_batch(denoiser.init_params(cfg, rng), s, own, schedule, np.random.default_rng(i))[0] for i in range(40)])
    assert bc < 0.5 * init
    assert bc == pytest.approx(floor, rel=0.5)


# -- buffers, proficiency, reward transform -----------------------------------------------


def test_target_buffer_evicts_lowest(small_params, schedule):
    segs, _ = make_segments(small_params, schedule, n=2)
    buf = TargetBuffer(2)
    buf.admit(_episode(segs, -5.0, True, 0))
    buf.admit(_episode(segs, -1.0, True, 1))
    buf.admit(_episode(segs, -3.0, True, 2))
    assert sorted(ep.score for ep in buf.episodes) == [-3.0, -1.0]
    assert len(buf) == 4 and buf.n_episodes == 2
    # ties evict the oldest
    buf.admit(_episode(segs, -3.0, True, 3))
    assert [ep.order for ep in buf.episodes] == [1, 3]


def test_target_buffer_bad_capacity():
    with pytest.raises(ValueError):
        TargetBuffer(0)


def test_proficiency_rule():
    rule = ProficiencyRule(0.9, window=100, min_history=10)
    ep = lambda ret, ok=False: _episode([], ret, ok)
    assert rule(ep(-100.0, ok=True))
    assert not rule(ep(10.0))  # too little history for the quantile
    for x in range(20):
        rule.observe(float(x))
    q = float(np.quantile(np.arange(20.0), 0.9))
    assert rule(ep(q)) and not rule(ep(q - 1e-9))


def test_reward_normalizer():
    norm = RewardNormalizer("standardize", clip=5.0)
    vals = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
    norm.update(vals)
    assert norm.mean == pytest.approx(vals.mean())
    assert norm.std == pytest.approx(vals.std())
    out = norm(vals)
    assert np.all(np.abs(out) <= 5.0)
    assert np.all(np.diff(out) >= 0)
    raw = RewardNormalizer("raw")
    np.testing.assert_array_equal(raw(vals), vals)
    with pytest.raises(ValueError):
        RewardNormalizer("rank")
