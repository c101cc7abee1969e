import numpy as np
import pytest

from fstta import model, navsim
from fstta.engine import AdaptSession, Strategy, entropy_gradient_hook
from fstta.errors import DataValidityError
from fstta.fast import FastConfig
from fstta.slow import SlowConfig, reference_direction, slow_gradient


@pytest.fixture(scope="module")
def params():
    return model.PolicyParams.init(seed=0)


def feed_sample(session, grads):
    session.on_sample_start()
    for g in grads:
        session.on_action_step(g)
    session.on_sample_end()


def rand_grads(rng, t, d=128):
    return rng.normal(size=(t, d)) * 1e-2


@pytest.mark.parametrize("t", range(0, 11))
def test_fast_update_count_per_sample(params, t):
    s = AdaptSession(params, Strategy.fast_only(FastConfig(M=3)))
    feed_sample(s, rand_grads(np.random.default_rng(t), t))
    # full windows plus one flush when at least two gradients are left over
    assert s.fast_updates == t // 3 + (1 if t % 3 >= 2 else 0)


@pytest.mark.parametrize("t", range(0, 6))
def test_tent_flushes_single_leftover(params, t):
    s = AdaptSession(params, Strategy.tent_interval(2))
    feed_sample(s, rand_grads(np.random.default_rng(t), t))
    assert s.fast_updates == -(-t // 2)


def test_slow_update_count(params):
    s = AdaptSession(params, Strategy.fast_slow(FastConfig(base_lr=0.1), SlowConfig(N=4, lr=1.0)))
    rng = np.random.default_rng(0)
    for i in range(11):
        feed_sample(s, rand_grads(rng, 4))
        assert s.l == (i + 1) // 4
    assert s.o == 11


def test_fast_only_never_takes_slow_steps(params):
    s = AdaptSession(params, Strategy.fast_only(FastConfig(base_lr=0.1)))
    rng = np.random.default_rng(1)
    for _ in range(9):
        feed_sample(s, rand_grads(rng, 5))
    assert s.l == 0 and not s.slow_log
    np.testing.assert_array_equal(s.anchor, s.pristine)


def test_no_adapt_never_moves(params):
    s = AdaptSession(params, Strategy.no_adapt())
    for _ in range(5):
        feed_sample(s, rand_grads(np.random.default_rng(2), 7))
    np.testing.assert_array_equal(s.theta, params.adaptable_vector())
    assert s.fast_updates == 0


def test_anchor_chain(params):
    cfg = SlowConfig(N=2, lr=0.5)
    s = AdaptSession(params, Strategy.fast_slow(FastConfig(base_lr=0.05), cfg))
    rng = np.random.default_rng(3)
    for _ in range(8):
        feed_sample(s, rand_grads(rng, 6))
    assert len(s.slow_log) == 4
    np.testing.assert_array_equal(s.slow_log[0][0], s.pristine)
    for k, (prev, grad, new) in enumerate(s.slow_log):
        np.testing.assert_allclose(new - prev, -cfg.lr * grad, rtol=1e-12, atol=1e-15)
        if k:
            np.testing.assert_array_equal(prev, s.slow_log[k - 1][2])


def test_slow_step_starts_from_anchor_not_live_theta(params):
    cfg = SlowConfig(N=2, lr=0.5)
    s = AdaptSession(params, Strategy.fast_slow(FastConfig(base_lr=0.05), cfg))
    rng = np.random.default_rng(4)
    feed_sample(s, rand_grads(rng, 6))
    first = s.theta.copy()
    # in-place edits of the live vector must not leak into the recorded state
    s.theta += 5.0
    s.theta -= 5.0
    s.theta[0] += 1.0
    np.testing.assert_array_equal(s.traj.as_array()[1], first)
    s.on_sample_start()
    for g in rand_grads(rng, 6):
        s.on_action_step(g)
    s._flush()
    traj = np.vstack([s.traj.as_array(), s.theta])
    want = s.anchor - cfg.lr * slow_gradient(traj, reference_direction(traj, cfg.q))
    live = s.theta.copy()
    s.on_sample_end()
    np.testing.assert_allclose(s.theta, want, rtol=1e-12, atol=1e-15)
    assert not np.allclose(s.theta, live - cfg.lr * s.slow_log[0][1])


def test_identical_states_make_slow_step_noop(params):
    cfg = SlowConfig(N=3, lr=1.0)
    s = AdaptSession(params, Strategy.fast_slow(FastConfig(base_lr=0.05), cfg))
    for _ in range(3):
        feed_sample(s, [])  # no gradients, so every recorded state equals the anchor
    assert s.l == 1
    np.testing.assert_array_equal(s.theta, s.pristine)


def test_non_finite_gradients_are_quarantined(params):
    s = AdaptSession(params, Strategy.fast_only(FastConfig(base_lr=0.1)))
    g = rand_grads(np.random.default_rng(5), 3)
    bad = g[0].copy()
    bad[7] = np.nan
    s.on_sample_start()
    s.on_action_step(bad)
    s.on_action_step(np.full(128, np.inf))
    for row in g:
        s.on_action_step(row)
    s.on_sample_end()
    assert s.skipped_gradients == 2
    assert s.fast_updates == 1
    assert np.all(np.isfinite(s.theta))


def test_tent_stable_resets_each_sample(params):
    s = AdaptSession(params, Strategy.tent_stable(FastConfig(base_lr=0.1)))
    rng = np.random.default_rng(6)
    s.on_sample_start()
    g = rand_grads(rng, 1)[0]
    s.on_action_step(g)
    np.testing.assert_allclose(s.theta, s.pristine - 0.1 * g)
    s.on_sample_end()
    s.on_sample_start()
    np.testing.assert_array_equal(s.theta, s.pristine)


def test_two_step_flush_uses_eigen_path(params):
    cfg = FastConfig(M=3, base_lr=0.1, dlr=False)
    s = AdaptSession(params, Strategy.fast_only(cfg, dlr=False))
    g = np.tile(rand_grads(np.random.default_rng(7), 1), (2, 1))
    feed_sample(s, g)
    np.testing.assert_allclose(s.theta, s.pristine - 0.1 * g[0], rtol=1e-15)


def test_strategy_names_and_validation():
    assert Strategy.no_adapt().name == "NoAdapt"
    assert Strategy.tent_interval(3).name == "Tent-INT-3"
    assert Strategy.fast_only(dlr=False).name == "FastOnly-noDLR"
    assert Strategy.fast_slow().name == "FSTTA"
    with pytest.raises(DataValidityError):
        Strategy("bogus")
    with pytest.raises(DataValidityError):
        Strategy.fast_only(FastConfig(M=1))


def test_sessions_are_deterministic(pretrained):
    eps = navsim.generate_stream(11, navsim.ShiftSpec.unseen(11), 12)
    strat = Strategy.fast_slow(FastConfig(base_lr=0.18), SlowConfig(lr=1.0))
    runs = []
    for _ in range(2):
        s = AdaptSession(pretrained, strat)
        recs = navsim.run_stream(s, eps)
        runs.append((s.theta.tobytes(), [r.path for r in recs]))
    assert runs[0] == runs[1]


def test_entropy_hook_matches_fd_and_leaves_params(params):
    rng = np.random.default_rng(8)
    step = model.StepInput(rng.normal(size=8), rng.normal(size=(4, 8)), rng.normal(size=8))
    theta = params.adaptable_vector() + rng.normal(0, 0.2, 128)
    before = [a.copy() for _, a in params.named_arrays()]
    _, _, grad = entropy_gradient_hook(params, step, theta)
    for (_, a), b in zip(params.named_arrays(), before):
        np.testing.assert_array_equal(a, b)
    idx = rng.choice(128, 10, replace=False)
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += 1e-6
        tm[i] -= 1e-6
        fd = (model.entropy_loss(model.score_actions(params, step, tp))
              - model.entropy_loss(model.score_actions(params, step, tm))) / 2e-6
        assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-10)
