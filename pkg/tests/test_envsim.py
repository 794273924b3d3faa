import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillrec.envsim import (
    FIXTURES,
    FeaturizedTaskEnv,
    FeaturizedWorld,
    FeedbackChainError,
    LogFormatError,
    OrderingError,
    SessionContext,
    SimUser,
    TabularMdp,
    TabularTaskEnv,
    WorldParams,
    engagement_probs,
    env_step,
    ingest_log,
    make_fixture_mdp,
    sample_feedback,
    simulate_log,
    tabular_sample,
    validate_feedback,
    write_log,
)
from distillrec.nnkit import ParameterError
from distillrec.representation import synthetic_catalog


def small_world(n_items=12, n_users=20, seed=0, **kw):
    return FeaturizedWorld(synthetic_catalog(n_items, seed=seed), WorldParams(n_users=n_users, **kw), seed=seed)


def user(affinity=None, bias=(0.0, 0.0, 0.0), cond=(0.6, 0.7)):
    aff = np.zeros((3, 49)) if affinity is None else affinity
    return SimUser(aff, np.array(bias, dtype=float), np.array(cond, dtype=float), drift_rate=0.3)


# --- feedback chain ----------------------------------------------------------

def test_validate_feedback_accepts_chain():
    assert validate_feedback([1, 0, 0]).tolist() == [1, 0, 0]
    assert validate_feedback([1, 1, 1], 3).tolist() == [1, 1, 1]


def test_validate_feedback_names_fields():
    with pytest.raises(FeedbackChainError, match="monotone feedback chain violated: install=1 but click=0"):
        validate_feedback([0, 1, 0])
    with pytest.raises(FeedbackChainError, match="play=1 but install=0"):
        validate_feedback([1, 0, 1])
    with pytest.raises(FeedbackChainError):
        validate_feedback([1, 2, 0])
    with pytest.raises(FeedbackChainError):
        validate_feedback([1, 0], 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sampled_feedback_is_always_monotone(seed):
    rng = np.random.default_rng(seed)
    probs = rng.random((5, 4, 3))
    fb = sample_feedback(probs, rng)
    assert np.all(np.diff(fb, axis=-1) <= 0)
    for row in fb.reshape(-1, 3):
        validate_feedback(row)


# --- single-user step --------------------------------------------------------

def test_zero_conditional_rates_force_click_only():
    u = user(cond=(0.0, 0.0))
    rng = np.random.default_rng(0)
    ctx = SessionContext(np.zeros(49))
    a = np.random.default_rng(1).normal(size=(1, 49))
    for _ in range(200):
        fb, ctx = env_step(u, ctx, a, rng)
        assert fb[0, 1] == 0 and fb[0, 2] == 0


def test_very_negative_bias_suppresses_clicks():
    u = user(bias=(-40.0, 0.0, 0.0))
    rng = np.random.default_rng(0)
    ctx = SessionContext(np.zeros(49))
    a = synthetic_catalog(1, seed=0).actions
    clicks = 0
    for _ in range(10_000):
        fb, _ = env_step(u, ctx, a, rng)
        clicks += fb[0, 0]
    assert clicks / 10_000 <= 0.01


def test_env_step_is_deterministic():
    cat = synthetic_catalog(5, seed=2)
    u = user(affinity=np.random.default_rng(3).normal(size=(3, 49)))

    def run():
        rng = np.random.default_rng(11)
        ctx = SessionContext(np.zeros(49))
        out = []
        for k in range(30):
            fb, ctx = env_step(u, ctx, cat.actions[[k % 5]], rng)
            out.append(fb.tolist())
        return out, ctx.drift

    (a, da), (b, db) = run(), run()
    assert a == b and np.array_equal(da, db)


def test_drift_moves_toward_clicked_genre():
    cat = synthetic_catalog(3, seed=0)
    u = user(bias=(40.0, 0.0, 0.0))
    ctx = SessionContext(np.zeros(49))
    fb, ctx2 = env_step(u, ctx, cat.actions[[0]], np.random.default_rng(0))
    assert fb[0, 0] == 1
    genre = int(np.argmax(cat.items[0].v_p[:4]))
    assert ctx2.drift[41 + genre] > 0 and ctx2.step == 1


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 5))
def test_click_probability_monotone_in_affinity(base, extra):
    a = np.zeros((1, 1, 2))
    a[0, 0, 0] = 1.0
    aff = np.zeros((1, 3, 2))
    lo = aff.copy()
    lo[0, 0, 0] = base
    hi = aff.copy()
    hi[0, 0, 0] = base + extra
    args = (np.zeros((1, 3)), np.full((1, 2), 0.5), np.zeros((1, 2)), a)
    assert engagement_probs(hi, *args)[0, 0, 0] >= engagement_probs(lo, *args)[0, 0, 0]


def test_sim_user_validation():
    with pytest.raises(ParameterError):
        user(cond=(1.5, 0.2))


# --- tabular -----------------------------------------------------------------

@pytest.mark.parametrize("name", FIXTURES)
def test_fixture_rows_sum_to_one(name):
    mdp = make_fixture_mdp(name)
    assert np.max(np.abs(mdp.transition.sum(axis=-1) - 1)) <= 1e-10


def test_unknown_fixture():
    with pytest.raises(ParameterError, match="unknown fixture"):
        make_fixture_mdp("nope")


def test_mdp_rejects_bad_rows():
    with pytest.raises(ParameterError):
        TabularMdp(np.full((2, 1, 2), 0.6), np.zeros((2, 1)))


def test_tabular_sample_deterministic_row_and_reward():
    mdp = make_fixture_mdp("two-state-switch")
    rng = np.random.default_rng(0)
    for _ in range(20):
        r, s = tabular_sample(mdp, 0, 0, 0, rng)
        assert (r, s) == (1, 1)
        r, s = tabular_sample(mdp, 0, 1, 1, rng)
        assert (r, s) == (0, 0)


def test_tabular_sample_split():
    P = np.full((2, 1, 2), 0.5)
    mdp = TabularMdp(P, np.zeros((2, 1)))
    rng = np.random.default_rng(42)
    hits = sum(tabular_sample(mdp, 0, 0, 0, rng)[1] for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02


def test_tabular_sample_index_errors():
    mdp = make_fixture_mdp("two-state-switch")
    rng = np.random.default_rng(0)
    for args in ((1, 0, 0), (0, 2, 0), (0, 0, 5)):
        with pytest.raises(IndexError):
            tabular_sample(mdp, *args, rng)


def test_random_fixture_rewards_nest():
    mdp = make_fixture_mdp("random-6x4")
    assert mdp.n_tasks == 3
    assert np.all(mdp.reward[0] >= mdp.reward[1]) and np.all(mdp.reward[1] >= mdp.reward[2])


def test_tabular_env_is_reproducible():
    mdp = make_fixture_mdp("random-6x4")

    def run():
        env = TabularTaskEnv(mdp, 1, np.random.default_rng(3), session_len=5)
        out = []
        for k in range(40):
            r, s, term = env.step(k % 4)
            out.append((r, int(np.argmax(s.long_term)), term))
        return out

    assert run() == run()


# --- featurized world --------------------------------------------------------

def test_world_step_shapes_and_chain():
    w = small_world()
    rng = np.random.default_rng(0)
    batch = w.start_sessions(np.arange(6), rng)
    obs = w.observe(batch)
    assert obs.history.shape == (6, 3, 52) and obs.long_term.shape == (6, 10) and obs.context.shape == (6, 3)
    fb = w.step(batch, rng.integers(12, size=(6, 3)), rng)
    assert fb.shape == (6, 3, 3)
    assert np.all(np.diff(fb, axis=-1) <= 0)
    assert np.array_equal(batch.step, np.ones(6))


def test_world_history_records_last_item():
    w = small_world()
    rng = np.random.default_rng(0)
    batch = w.start_sessions([0], rng)
    fb = w.step(batch, np.array([[4]]), rng)
    last = w.observe(batch).history[0, -1]
    assert np.array_equal(last[:49], w.catalog.actions[4])
    assert np.array_equal(last[49:], fb[0, 0])


def test_task_env_interface():
    env = FeaturizedTaskEnv(small_world(session_len=4), task=2, rng=np.random.default_rng(1))
    terms = []
    for k in range(8):
        r, nxt, term = env.step(k % 12)
        assert r in (0, 1) and nxt.history.shape == (3, 52)
        terms.append(term)
    assert terms == [False, False, False, True] * 2


def test_feedback_block_is_filled_with_rates():
    w = small_world()
    rates = w.population_rates()
    vh = w.catalog.actions[:, 32:41]
    assert np.allclose(vh[:, 0], rates[:, 0], atol=0.05)


# --- logs --------------------------------------------------------------------

def test_simulated_log_counts_and_validates(tmp_path):
    w = small_world(n_users=10)
    events = simulate_log(w, 2, 5, np.random.default_rng(0))
    assert len(events) == 10 * 2 * 5
    path = tmp_path / "log.jsonl"
    write_log(events, path)
    back = list(ingest_log(path))
    assert len(back) == 100
    assert [e.to_json() for e in back] == [e.to_json() for e in events]


def test_simulated_log_is_reproducible(tmp_path):
    def make(p):
        write_log(simulate_log(small_world(n_users=5), 2, 4, np.random.default_rng(9)), p)
        return p.read_bytes()

    assert make(tmp_path / "a.jsonl") == make(tmp_path / "b.jsonl")


def _line(**over):
    rec = {"user_id": "u1", "ts": 10, "item_id": "i1", "feedback": [1, 0, 0], "context": {"hour": 0.5}}
    rec.update(over)
    return json.dumps(rec)


def test_ingest_accepts_and_rejects(tmp_path):
    p = tmp_path / "ok.jsonl"
    p.write_text(_line() + "\n")
    assert list(ingest_log(p))[0].feedback == (1, 0, 0)
    bad = tmp_path / "bad.jsonl"
    bad.write_text(_line() + "\n" + _line(ts=20, feedback=[0, 1, 0]) + "\n")
    with pytest.raises(FeedbackChainError, match="line 2: monotone feedback chain violated"):
        list(ingest_log(bad))


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert list(ingest_log(p)) == []


def test_ingest_malformed_and_missing_keys(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(_line() + "\n{not json\n")
    with pytest.raises(LogFormatError, match="line 2"):
        list(ingest_log(p))
    q = tmp_path / "k.jsonl"
    q.write_text(json.dumps({"user_id": "u", "ts": 1, "item_id": "i", "feedback": [1, 0, 0]}) + "\n")
    with pytest.raises(LogFormatError, match="context"):
        list(ingest_log(q))


def test_ingest_ordering(tmp_path):
    p = tmp_path / "o.jsonl"
    p.write_text(_line(ts=50) + "\n" + _line(user_id="u2", ts=5) + "\n" + _line(ts=40) + "\n")
    with pytest.raises(OrderingError, match="line 3"):
        list(ingest_log(p))
