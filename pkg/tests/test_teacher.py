import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillrec.envsim import FeaturizedTaskEnv, FeaturizedWorld, TabularTaskEnv, WorldParams, make_fixture_mdp
from distillrec.nnkit import ParameterError, TrainingError, grad_check
from distillrec.representation import StateInput, synthetic_catalog
from distillrec.teacher import (
    Experience,
    ExperienceBatch,
    ReplayBuffer,
    TeacherConfig,
    TeacherDims,
    TeacherNet,
    ddqn_target,
    ddqn_targets,
    q_scores,
    q_value,
    select_action,
    squared_loss_and_grad,
    tabular_dims,
    teacher_loss_and_grad,
    train_teacher,
)


def linear_net(weights, bias=0.0, n_states=1):
    """Single identity layer on one-hot ``s (+) a``: Q(s, a) = w_s + w_a + bias."""
    n_actions = len(weights) - n_states
    net = TeacherNet.init(tabular_dims(n_states, n_actions, hidden=()), np.random.default_rng(0))
    net.params["q0.W"][:, 0] = weights
    net.params["q0.b"][:] = bias
    return net


def onehot_state(s=0, n=1):
    return StateInput(None, np.eye(n)[s], np.zeros(0))


def small_featurized_net(seed=0, hidden=(8, 4)):
    dims = TeacherDims(action_dim=49, n_tasks=3, n_u=4, n_gru=3, hidden=hidden)
    return TeacherNet.init(dims, np.random.default_rng(seed))


def random_inputs(rng, n, dims):
    return StateInput(rng.normal(size=(n, dims.window, dims.n_x)), rng.random((n, dims.n_long)),
                      rng.random((n, dims.n_ctx)))


# --- Q and action selection --------------------------------------------------

def test_zero_net_gives_zero_q():
    net = small_featurized_net()
    for v in net.params.values():
        v[...] = 0.0
    rng = np.random.default_rng(1)
    q = q_scores(net, random_inputs(rng, 3, net.dims), rng.normal(size=(5, 49)))
    assert not q.any()


def test_q_value_is_stable_and_dot_product_case():
    net = linear_net([1.0, 0.0, 0.0])
    assert q_value(net, onehot_state(), np.array([0.0, 0.0])) == 1.0
    deep = small_featurized_net(2)
    rng = np.random.default_rng(2)
    s = StateInput(rng.normal(size=(3, 52)), rng.random(10), rng.random(3))
    a = rng.normal(size=49)
    assert q_value(deep, s, a) == q_value(deep, s, a)


def test_greedy_pick_and_tie_rule():
    rng = np.random.default_rng(0)
    net = linear_net([0.0, 0.1, 0.9, 0.5])
    assert select_action(net, onehot_state(), np.eye(3), 0.0, rng)[0] == 1
    flat = linear_net([0.0, 0.3, 0.3, 0.3])
    assert select_action(flat, onehot_state(), np.eye(3), 0.0, rng)[0] == 0


def test_uniform_exploration_frequencies():
    net = linear_net([0.0, 1.0, 0.0, 0.0, 0.0])
    rng = np.random.default_rng(7)
    counts = np.bincount([select_action(net, onehot_state(), np.eye(4), 1.0, rng)[0] for _ in range(10_000)],
                         minlength=4)
    assert np.all(np.abs(counts / 10_000 - 0.25) <= 0.02)


def test_select_action_errors():
    net = linear_net([0.0, 1.0])
    with pytest.raises(ParameterError, match="empty catalog"):
        select_action(net, onehot_state(), np.zeros((0, 1)), 0.0, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        select_action(net, onehot_state(), np.eye(1), 1.5, np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_argmax_invariant_to_output_shift(seed, shift):
    net = small_featurized_net(seed % 7)
    rng = np.random.default_rng(seed)
    s = StateInput(rng.normal(size=(3, 52)), rng.random(10), rng.random(3))
    cat = rng.normal(size=(6, 49))
    k0 = select_action(net, s, cat, 0.0, np.random.default_rng(0))[0]
    last = f"q{len(net.dims.hidden)}.b"
    net.params[last] += shift
    # a large shift can merge near-equal scores; only compare when the gap survives rounding
    q = q_scores(net, s, cat)
    if np.sort(q)[-1] - np.sort(q)[-2] > 1e-9 * max(1.0, abs(shift)):
        assert select_action(net, s, cat, 0.0, np.random.default_rng(0))[0] == k0


# --- DDQN target and loss ----------------------------------------------------

def test_ddqn_target_hand_example():
    # the current net ranks the second item highest; the target net values it at 2.0
    current = linear_net([0.0, 0.3, 0.9, 0.1])
    target = linear_net([0.0, 5.0, 2.0, 7.0])
    y = ddqn_target(current, target, 1, onehot_state(), np.eye(3), 0.6, False)
    assert y == pytest.approx(2.2, abs=1e-12)


def test_ddqn_target_trivial_cases():
    current, target = linear_net([0.0, 1.0, 2.0]), linear_net([0.0, 3.0, 4.0])
    assert ddqn_target(current, target, 1, onehot_state(), np.eye(2), 0.0, False) == 1.0
    assert ddqn_target(current, target, 1, onehot_state(), np.eye(2), 0.6, True) == 1.0
    with pytest.raises(ParameterError):
        ddqn_target(current, target, 1, onehot_state(), np.eye(2), 1.5, False)
    with pytest.raises(ParameterError, match="empty catalog"):
        ddqn_target(current, target, 1, onehot_state(), np.zeros((0, 2)), 0.6, False)


def test_loss_is_zero_when_q_equals_target():
    net = linear_net([0.0, 0.5, 0.5])
    exps = [Experience(onehot_state(), np.eye(2)[0], 1, onehot_state(), terminal=False)]
    # gamma = 0 makes the target the reward; Q = 0.5 + bias 0.5 = 1
    net.params["q0.b"][:] = 0.5
    loss, grads = teacher_loss_and_grad(net, exps, net.copy(), 0.0, np.eye(2))
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_scalar_quadratic_loss():
    # Q = w * 1 with a single weight; loss = (y - w)^2 / 2, grad = w - y
    net = TeacherNet.init(tabular_dims(1, 0, hidden=()), np.random.default_rng(0))
    net.params["q0.W"][:] = 3.0
    inputs = StateInput(None, np.ones((1, 1)), np.zeros((1, 0)))
    loss, grads = squared_loss_and_grad(net, inputs, np.zeros((1, 0)), np.array([1.0]))
    assert loss == pytest.approx(2.0)
    assert grads["q0.W"][0, 0] == pytest.approx(2.0)


def test_teacher_loss_gradient_matches_finite_differences():
    net = small_featurized_net(3)
    rng = np.random.default_rng(4)
    for v in net.params.values():
        v[...] += rng.normal(scale=0.3, size=v.shape)
    dims = net.dims
    cat = rng.normal(size=(5, 49))
    batch = ExperienceBatch(random_inputs(rng, 6, dims), cat[rng.integers(5, size=6)],
                            rng.integers(2, size=6).astype(float), random_inputs(rng, 6, dims), np.zeros(6, bool))
    target = net.copy()
    loss, grads = teacher_loss_and_grad(net, batch, target, 0.6, cat)
    y = ddqn_targets(net, target, batch.r, batch.s_next, cat, 0.6, batch.terminal)
    report = grad_check(lambda: squared_loss_and_grad(net, batch.s, batch.a, y)[0], net.params, grads,
                        n_coords=100, rng=np.random.default_rng(5))
    assert report.passed, str(report)


def test_frozen_h0_gets_no_gradient():
    net = small_featurized_net()
    assert {"gru0.h0", "gru1.h0", "gru2.h0"} <= net.frozen
    rng = np.random.default_rng(0)
    inputs = random_inputs(rng, 2, net.dims)
    _, grads = squared_loss_and_grad(net, inputs, rng.normal(size=(2, 49)), np.ones(2))
    assert not any(k.endswith("h0") for k in grads)


def test_empty_batch():
    with pytest.raises(ParameterError):
        teacher_loss_and_grad(linear_net([0.0, 1.0]), [], linear_net([0.0, 1.0]), 0.6, np.eye(1))


def test_experience_reward_must_be_binary():
    with pytest.raises(ParameterError):
        Experience(onehot_state(), np.eye(1)[0], 2, onehot_state())


# --- replay buffer -----------------------------------------------------------

def _exp(tag):
    return Experience(onehot_state(), np.array([float(tag)]), 0, onehot_state(), a_index=tag)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 80))
def test_replay_keeps_last_entries_in_order(capacity, n):
    buf = ReplayBuffer(capacity)
    for k in range(n):
        buf.add(_exp(k))
    kept = [e.a_index for e in buf.items()]
    assert kept == list(range(max(0, n - capacity), n))


def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(8)
    for k in range(12):
        buf.add(_exp(k))
    rng = np.random.default_rng(0)
    idx = np.concatenate([buf.sample_indices(64, rng) for _ in range(1000)])
    freq = np.bincount(idx, minlength=8) / idx.size
    # 64000 draws: sd of each slot frequency is about 0.0013
    assert np.all(np.abs(freq - 1 / 8) <= 0.006)


def test_replay_errors():
    with pytest.raises(ParameterError):
        ReplayBuffer(0)
    with pytest.raises(ParameterError):
        ReplayBuffer(3).sample(1, np.random.default_rng(0))


# --- training loop -----------------------------------------------------------

def test_zero_epochs_returns_initialization():
    mdp = make_fixture_mdp("two-state-switch")
    net = TeacherNet.init(tabular_dims(2, 2), np.random.default_rng(0))
    before = {k: v.copy() for k, v in net.params.items()}
    res = train_teacher(TabularTaskEnv(mdp, 0, np.random.default_rng(1)), TeacherConfig(epochs=0), net,
                        np.random.default_rng(2))
    assert res.steps == 0 and res.curve == []
    assert all(np.array_equal(before[k], net.params[k]) for k in before)


def test_target_sync_and_staleness():
    mdp = make_fixture_mdp("random-6x4")
    net = TeacherNet.init(tabular_dims(6, 4, (8,)), np.random.default_rng(0))
    cfg = TeacherConfig(epochs=1, steps_per_epoch=65, batch_size=8, target_every=20, keep_states=False)
    seen = []

    def on_sync(step, cur, tgt):
        seen.append(step)
        assert all(np.array_equal(cur.params[k], tgt.params[k]) for k in cur.params)

    env = TabularTaskEnv(mdp, 0, np.random.default_rng(1))
    holder, snapshots = {}, []
    plain_step = env.step

    def watched(a):
        # the target net object is handed out at the first sync; record it before every later step
        if "target" in holder:
            snapshots.append((len(snapshots) + 20, {k: v.copy() for k, v in holder["target"].params.items()}))
        return plain_step(a)

    def keep(step, cur, tgt):
        holder["target"] = tgt
        on_sync(step, cur, tgt)

    env.step = watched
    res = train_teacher(env, cfg, net, np.random.default_rng(2), on_sync=keep)
    assert seen == [20, 40, 60] and res.syncs == seen
    # the target seen before interaction k may differ from the previous one only if step k synced
    for (k0, p0), (k, p) in zip(snapshots, snapshots[1:]):
        if k not in seen:
            assert all(np.array_equal(p0[n], p[n]) for n in p), k
    assert len(snapshots) == 45


def test_single_loop_learns_geometric_value():
    mdp = make_fixture_mdp("single-loop")
    net = TeacherNet.init(tabular_dims(1, 1, (16, 8)), np.random.default_rng(0))
    cfg = TeacherConfig(epochs=6, steps_per_epoch=300, batch_size=16, keep_states=False)
    train_teacher(TabularTaskEnv(mdp, 0, np.random.default_rng(1)), cfg, net, np.random.default_rng(2))
    assert abs(q_value(net, onehot_state(), np.ones(1)) - 2.5) <= 0.1


def test_training_is_reproducible():
    def run():
        mdp = make_fixture_mdp("random-6x4")
        net = TeacherNet.init(tabular_dims(6, 4, (8,)), np.random.default_rng(0))
        cfg = TeacherConfig(epochs=2, steps_per_epoch=30, batch_size=8, keep_states=False)
        res = train_teacher(TabularTaskEnv(mdp, 1, np.random.default_rng(1)), cfg, net, np.random.default_rng(2))
        return res.curve, net.params

    (c1, p1), (c2, p2) = run(), run()
    assert c1 == c2 and all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_featurized_training_runs_and_records_states():
    world = FeaturizedWorld(synthetic_catalog(8), WorldParams(n_users=5, session_len=4), seed=0)
    env = FeaturizedTaskEnv(world, 1, np.random.default_rng(0))
    net = small_featurized_net()
    res = train_teacher(env, TeacherConfig(epochs=1, steps_per_epoch=10, batch_size=4), net, np.random.default_rng(1))
    assert res.steps == 10 and len(res.states) == 10
    assert 0.0 <= res.curve[0]["reward"] <= 1.0


def test_environment_failure_carries_step():
    class Broken:
        catalog = np.eye(2)

        def observe(self):
            return onehot_state(0, 2)

        def step(self, k):
            raise RuntimeError("boom")

    net = TeacherNet.init(tabular_dims(2, 2), np.random.default_rng(0))
    with pytest.raises(TrainingError, match="epoch 0, step 0: boom"):
        train_teacher(Broken(), TeacherConfig(epochs=1, steps_per_epoch=3), net, np.random.default_rng(0))
