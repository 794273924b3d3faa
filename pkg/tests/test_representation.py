from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillrec.nnkit import ShapeError, relative_error
from distillrec.representation import (
    ActionVector,
    BlockDims,
    ConfigError,
    StateInput,
    build_action,
    build_long_term,
    build_state,
    context_vector,
    encode_short_term,
    encoder_backward,
    encoder_forward,
    encoder_view,
    history_matrix,
    init_encoder_params,
    load_catalog,
    split_state,
    stack_inputs,
    synth_item_blocks,
    synthetic_catalog,
    take_inputs,
    unstack_inputs,
    write_catalog,
)


@dataclass
class Ev:
    item_id: str
    ts: int
    feedback: tuple


def raw_item(dims=BlockDims()):
    rng = np.random.default_rng(0)
    return {"v_d": rng.normal(size=dims.d), "v_a": rng.normal(size=dims.a), "v_h": np.zeros(dims.h),
            "v_p": rng.normal(size=dims.p)}


# --- actions -----------------------------------------------------------------

def test_action_dim_is_49():
    a = build_action(raw_item())
    assert a.dim == 49 and BlockDims().total == 49


def test_action_concatenation_order():
    item = raw_item()
    a = build_action(item)
    offs = BlockDims().offsets()
    for key in ("v_d", "v_a", "v_h", "v_p"):
        assert np.array_equal(a.a[offs[key]], item[key])


def test_zero_feedback_block_passes_through():
    a = build_action(raw_item())
    assert not a.v_h.any()


def test_missing_profile_block_is_named():
    item = raw_item()
    del item["v_p"]
    with pytest.raises(ConfigError, match="profile block: expected dim 8, got 0"):
        build_action(item)


def test_wrong_block_dim_is_named():
    item = raw_item()
    item["v_d"] = np.zeros(3)
    with pytest.raises(ConfigError, match="description block"):
        build_action(item)


def test_synthetic_items_are_deterministic_per_id():
    a = synth_item_blocks("item0007", seed=3)
    b = synth_item_blocks("item0007", seed=3)
    c = synth_item_blocks("item0008", seed=3)
    assert all(np.array_equal(a[k], b[k]) for k in ("v_d", "v_a", "v_p"))
    assert not np.array_equal(a["v_d"], c["v_d"])
    assert a["v_p"][:4].sum() == 1.0


def test_catalog_file_round_trip(tmp_path):
    cat = synthetic_catalog(5, seed=1)
    path = tmp_path / "items.jsonl"
    write_catalog(cat, path)
    back = load_catalog(path)
    assert back.item_ids == cat.item_ids
    assert np.array_equal(back.actions, cat.actions)


def test_catalog_file_synthesizes_missing_blocks(tmp_path):
    path = tmp_path / "items.jsonl"
    path.write_text('{"item_id": "g1"}\n{"item_id": "g2", "v_h": [1,1,1,1,1,1,1,1,1]}\n')
    cat = load_catalog(path, seed=4)
    assert cat.actions.shape == (2, 49)
    assert np.array_equal(cat.items[1].v_h, np.ones(9))
    assert np.array_equal(cat.items[0].v_d, synth_item_blocks("g1", seed=4)["v_d"])


# --- state -------------------------------------------------------------------

def test_state_dim_and_round_trip():
    rng = np.random.default_rng(0)
    parts = rng.normal(size=10), rng.normal(size=10), rng.normal(size=3)
    s = build_state(*parts)
    assert s.dim == 23
    for got, want in zip(split_state(s.s), parts):
        assert np.array_equal(got, want)


def test_zero_state():
    s = build_state(np.zeros(10), np.zeros(10), np.zeros(3))
    assert not s.s.any()


def test_state_dim_mismatch():
    with pytest.raises(ShapeError, match="long-term"):
        build_state(np.zeros(10), np.zeros(9), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 4))
def test_split_inverts_concatenation(n_s, n_l, n_c):
    rng = np.random.default_rng(n_s * 100 + n_l * 10 + n_c)
    parts = rng.normal(size=n_s), rng.normal(size=n_l), rng.normal(size=n_c)
    s = build_state(*parts, dims=(n_s, n_l, n_c))
    for got, want in zip(split_state(s.s, (n_s, n_l, n_c)), parts):
        assert np.array_equal(got, want)


def test_context_vector():
    # 1970-01-01 is a Thursday (day index 0 in this encoding); 13:00 UTC
    c = context_vector(13 * 3_600_000, 2, 4)
    assert np.allclose(c, [13 / 24, 0.0, 0.5])


def test_state_input_helpers():
    rng = np.random.default_rng(0)
    items = [StateInput(rng.normal(size=(3, 52)), rng.normal(size=10), rng.normal(size=3)) for _ in range(4)]
    batch = stack_inputs(items)
    assert batch.batched and len(batch) == 4
    again = unstack_inputs(batch)
    assert all(np.array_equal(a.history, b.history) for a, b in zip(items, again))
    sub = take_inputs(batch, [2, 0])
    assert np.array_equal(sub.long_term[0], items[2].long_term)


# --- short-term encoder ------------------------------------------------------

def make_encoder(seed=0, n_x=52, n_u=10, layers=3, window=3):
    params = init_encoder_params(np.random.default_rng(seed), n_x, n_u, layers)
    return params, encoder_view(params, layers, window)


def test_zero_encoder_with_zero_h0_gives_zero():
    params, enc = make_encoder()
    for v in params.values():
        v[...] = 0.0
    hist = [(np.ones(49), np.array([1, 1, 0]))] * 3
    assert not encode_short_term(enc, hist).any()


def test_zero_encoder_halves_initial_state_each_step():
    params, enc = make_encoder(layers=1, window=3)
    for k, v in params.items():
        if not k.endswith("h0"):
            v[...] = 0.0
    h0 = params["gru0.h0"].copy()
    u = encode_short_term(enc, [(np.ones(49), np.zeros(3))] * 3)
    assert np.array_equal(u, h0 * 0.125)


def test_identical_histories_identical_codes():
    _, enc = make_encoder(1)
    rng = np.random.default_rng(5)
    hist = [(rng.normal(size=49), np.array([1, 0, 0])) for _ in range(3)]
    assert np.array_equal(encode_short_term(enc, hist), encode_short_term(enc, list(hist)))


def test_history_left_padding():
    X = history_matrix([(np.ones(2), np.array([1]))], window=3, n_x=3)
    assert np.array_equal(X, np.array([[0, 0, 0], [0, 0, 0], [1, 1, 1.0]]))
    with pytest.raises(ShapeError):
        history_matrix([(np.ones(2), np.array([1, 0]))], window=3, n_x=3)


def test_history_uses_only_last_window():
    rows = [(np.full(2, float(k)), np.array([0])) for k in range(5)]
    X = history_matrix(rows, window=3, n_x=3)
    assert np.array_equal(X[:, 0], [2.0, 3.0, 4.0])


def test_batched_encoder_matches_single():
    _, enc = make_encoder(2)
    X = np.random.default_rng(1).normal(size=(4, 3, 52))
    ub, _ = encoder_forward(enc, X)
    for b in range(4):
        u1, _ = encoder_forward(enc, X[b])
        assert np.allclose(ub[b], u1, atol=1e-15)


def test_encoder_backward_matches_finite_differences():
    params, enc = make_encoder(3, n_x=6, n_u=4, layers=3)
    rng = np.random.default_rng(2)
    for k, v in params.items():
        v[...] = rng.normal(scale=0.6, size=v.shape)
    X = rng.normal(size=(2, 3, 6))
    g = rng.normal(size=(2, 4))

    def f():
        return float((encoder_forward(enc, X)[0] * g).sum())

    _, traces = encoder_forward(enc, X)
    grads, dX = encoder_backward(enc, traces, g)
    h = 1e-6
    for name, block in list(params.items()) + [("X", X)]:
        analytic = dX if name == "X" else grads[name]
        flat = block.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            assert relative_error(analytic.reshape(-1)[i], (fp - fm) / (2 * h)) <= 1e-4, (name, i)


# --- long-term interest ------------------------------------------------------

def reference_long_term(events, genre_of, count_scale=50.0):
    """Single-pass re-derivation of the ten long-term features."""
    if not events:
        return [0.0] * 10
    n = len(events)
    rates = [sum(e.feedback[i] for e in events) / n for i in range(3)]
    clicks = [0.0] * 4
    for e in events:
        if e.feedback[0]:
            clicks[genre_of(e.item_id)] += 1
    total_clicks = sum(clicks)
    genre = [c / total_clicks if total_clicks else 0.0 for c in clicks]
    first, last = events[0].ts, events[-1].ts
    span = last - first
    recency = (sum(e.ts - first for e in events) / n) / span if span > 0 else 0.0
    score = sum(sum(e.feedback) / 3 for e in events) / n
    return rates + genre + [n / (n + count_scale), recency, score]


def random_events(n, seed):
    rng = np.random.default_rng(seed)
    ts = 1_000_000
    out = []
    for k in range(n):
        ts += int(rng.integers(1, 100_000))
        c = int(rng.random() < 0.5)
        i = c * int(rng.random() < 0.5)
        p = i * int(rng.random() < 0.5)
        out.append(Ev(f"item{int(rng.integers(8))}", ts, (c, i, p)))
    return out


def genre_of(item_id):
    return int(item_id[4:]) % 4


def test_long_term_empty_history_is_zero():
    assert np.array_equal(build_long_term([]), np.zeros(10))


def test_long_term_all_clicks_rate_one():
    evs = [Ev("item1", 10 * k, (1, 0, 0)) for k in range(5)]
    assert build_long_term(evs, genre_of)[0] == 1.0


def test_long_term_matches_reference():
    evs = random_events(100, 0)
    assert np.allclose(build_long_term(evs, genre_of), reference_long_term(evs, genre_of), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 60), st.integers(0, 10_000))
def test_long_term_in_unit_interval(n, seed):
    v = build_long_term(random_events(n, seed), genre_of)
    assert v.shape == (10,)
    assert np.all(v >= 0) and np.all(v <= 1)


def test_long_term_changes_slowly():
    evs = random_events(1000, 1)
    before = build_long_term(evs, genre_of)
    extra = Ev("item3", evs[-1].ts + 5, (1, 1, 1))
    after = build_long_term(evs + [extra], genre_of)
    assert np.all(np.abs(after[:3] - before[:3]) <= 2 / 1000)


def test_action_vector_fields():
    a = ActionVector(np.ones(1), np.ones(2), np.zeros(1), np.ones(1))
    assert a.dim == 5
