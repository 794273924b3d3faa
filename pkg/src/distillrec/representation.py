"""Action and state representations.

An action (item) is the concatenation of four feature blocks, in the fixed
order description, appearance, aggregated feedback, profile. A user state is
``concat(u_s, u_l, u_c)``: a stacked-GRU summary of the last ``T``
interactions, ten slow-moving long-term statistics, and a small context vector.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .nnkit import (
    DTYPE,
    GRU_PARAM_NAMES,
    GruCell,
    ShapeError,
    gru_step,
    gru_step_backward,
)


class ConfigError(ValueError):
    """Invalid configuration or mismatched configured dimension."""


BLOCK_NAMES = {"v_d": "description", "v_a": "appearance", "v_h": "feedback", "v_p": "profile"}

# the profile block starts with a one-hot genre over this many buckets
N_GENRES = 4
N_LONG_TERM = 10
N_CONTEXT = 3


@dataclass(frozen=True)
class BlockDims:
    d: int = 16
    a: int = 16
    h: int = 9
    p: int = 8

    @property
    def total(self) -> int:
        return self.d + self.a + self.h + self.p

    def as_dict(self) -> dict:
        return {"v_d": self.d, "v_a": self.a, "v_h": self.h, "v_p": self.p}

    def offsets(self) -> dict:
        out, start = {}, 0
        for key, n in self.as_dict().items():
            out[key] = slice(start, start + n)
            start += n
        return out


@dataclass
class ActionVector:
    v_d: np.ndarray
    v_a: np.ndarray
    v_h: np.ndarray
    v_p: np.ndarray
    a: np.ndarray = field(init=False)

    def __post_init__(self):
        self.a = np.concatenate([self.v_d, self.v_a, self.v_h, self.v_p]).astype(DTYPE)

    @property
    def dim(self) -> int:
        return self.a.shape[0]


def build_action(raw_item: dict, dims: BlockDims = BlockDims()) -> ActionVector:
    """Validate the four feature blocks of ``raw_item`` and concatenate them."""
    blocks = {}
    for key, want in dims.as_dict().items():
        arr = np.asarray(raw_item.get(key, ()), dtype=DTYPE).reshape(-1)
        if arr.shape[0] != want:
            raise ConfigError(f"{BLOCK_NAMES[key]} block: expected dim {want}, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"{BLOCK_NAMES[key]} block: non-finite entries")
        blocks[key] = arr
    return ActionVector(**blocks)


def item_seed(item_id: str, seed: int) -> int:
    return zlib.crc32(item_id.encode("utf-8")) ^ (seed & 0xFFFFFFFF)


def synth_item_blocks(item_id: str, dims: BlockDims = BlockDims(), seed: int = 0) -> dict:
    """Deterministic synthetic feature blocks for one item, keyed by its id.

    Profile layout: genre one-hot (4), three appeal scores, one nuisance feature.
    The feedback block starts at zero (no history yet).
    """
    rng = np.random.default_rng(item_seed(item_id, seed))
    genre = int(rng.integers(N_GENRES))
    v_p = np.zeros(dims.p, dtype=DTYPE)
    v_p[genre] = 1.0
    v_p[N_GENRES:] = rng.normal(0.0, 1.0, size=dims.p - N_GENRES)
    return {
        "item_id": item_id,
        "v_d": rng.normal(0.0, 0.5, size=dims.d),
        "v_a": rng.normal(0.0, 0.5, size=dims.a),
        "v_h": np.zeros(dims.h),
        "v_p": v_p,
    }


@dataclass
class Catalog:
    item_ids: list
    items: list  # ActionVector per item
    dims: BlockDims = BlockDims()

    def __post_init__(self):
        if len(self.item_ids) != len(self.items):
            raise ConfigError("item ids and items differ in length")
        self.refresh()

    def refresh(self):
        self.actions = np.stack([it.a for it in self.items]) if self.items else np.zeros((0, self.dims.total))
        self.genres = np.array([int(np.argmax(it.v_p[:N_GENRES])) for it in self.items], dtype=np.int64)
        self.index = {iid: k for k, iid in enumerate(self.item_ids)}

    def __len__(self):
        return len(self.items)

    def set_feedback_block(self, v_h: np.ndarray) -> None:
        for it, row in zip(self.items, v_h):
            it.v_h = np.asarray(row, dtype=DTYPE).copy()
            it.__post_init__()
        self.refresh()


def synthetic_catalog(n_items: int, dims: BlockDims = BlockDims(), seed: int = 0) -> Catalog:
    ids = [f"item{k:04d}" for k in range(n_items)]
    return Catalog(ids, [build_action(synth_item_blocks(i, dims, seed), dims) for i in ids], dims)


def load_catalog(path, dims: BlockDims = BlockDims(), seed: int = 0) -> Catalog:
    """Read a line-delimited JSON item catalog; missing blocks are synthesized from the item id."""
    import json

    ids, items = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "item_id" not in rec:
                raise ConfigError(f"catalog line {lineno}: missing item_id")
            raw = synth_item_blocks(str(rec["item_id"]), dims, seed)
            raw.update({k: rec[k] for k in BLOCK_NAMES if k in rec})
            ids.append(str(rec["item_id"]))
            items.append(build_action(raw, dims))
    return Catalog(ids, items, dims)


def write_catalog(catalog: Catalog, path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for iid, it in zip(catalog.item_ids, catalog.items):
            rec = {"item_id": iid, "v_d": it.v_d.tolist(), "v_a": it.v_a.tolist(),
                   "v_h": it.v_h.tolist(), "v_p": it.v_p.tolist()}
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# short-term interest: stacked GRU

@dataclass
class GruEncoder:
    cells: list
    h0: list
    window: int = 3

    @property
    def n_x(self) -> int:
        return self.cells[0].n_x

    @property
    def n_u(self) -> int:
        return self.cells[-1].n_u

    def __post_init__(self):
        for k in range(1, len(self.cells)):
            if self.cells[k].n_x != self.cells[k - 1].n_u:
                raise ShapeError(f"GRU layer {k} input dim {self.cells[k].n_x} != layer {k - 1} hidden dim")
        for k, (cell, h) in enumerate(zip(self.cells, self.h0)):
            if h.shape != (cell.n_u,):
                raise ShapeError(f"initial hidden state {k} has shape {h.shape}")


def encoder_param_shapes(n_x: int, n_u: int, n_layers: int) -> dict:
    shapes = {}
    for k in range(n_layers):
        nin = n_x if k == 0 else n_u
        for name in GRU_PARAM_NAMES:
            if name.startswith("W_x"):
                shapes[f"gru{k}.{name}"] = (nin, n_u)
            elif name.startswith("W_h"):
                shapes[f"gru{k}.{name}"] = (n_u, n_u)
            else:
                shapes[f"gru{k}.{name}"] = (n_u,)
        shapes[f"gru{k}.h0"] = (n_u,)
    return shapes


def init_encoder_params(rng: np.random.Generator, n_x: int, n_u: int, n_layers: int,
                        h0_std: float = 0.01) -> dict:
    """Glorot weights, zero biases, and ``N(0, h0_std^2)`` initial hidden states."""
    params = {}
    for name, shape in encoder_param_shapes(n_x, n_u, n_layers).items():
        block = name.split(".", 1)[1]
        if block == "h0":
            params[name] = rng.normal(0.0, h0_std, size=shape)
        elif block.startswith("W_"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def encoder_view(params: dict, n_layers: int, window: int, prefix: str = "") -> GruEncoder:
    """Build a :class:`GruEncoder` whose arrays alias the entries of ``params``."""
    cells = [GruCell(**{n: params[f"{prefix}gru{k}.{n}"] for n in GRU_PARAM_NAMES}) for k in range(n_layers)]
    h0 = [params[f"{prefix}gru{k}.h0"] for k in range(n_layers)]
    return GruEncoder(cells, h0, window)


def encoder_forward(enc: GruEncoder, X: np.ndarray):
    """Run the stack over ``X`` of shape ``(T, N_x)`` or ``(B, T, N_x)``.

    Returns the final-layer, final-step hidden state and the gate traces
    (indexed ``[layer][step]``).
    """
    X = np.asarray(X, dtype=DTYPE)
    single = X.ndim == 2
    if single:
        X = X[None]
    B, T, n_x = X.shape
    if n_x != enc.n_x:
        raise ShapeError(f"history entries have dim {n_x}, encoder expects {enc.n_x}")
    traces = []
    seq = [X[:, t] for t in range(T)]
    for cell, h0 in zip(enc.cells, enc.h0):
        h = np.broadcast_to(h0, (B, cell.n_u))
        layer_tr, out = [], []
        for x in seq:
            h, tr = gru_step(cell, x, h)
            layer_tr.append(tr)
            out.append(h)
        traces.append(layer_tr)
        seq = out
    u_s = seq[-1]
    return (u_s[0] if single else u_s), traces


def encoder_backward(enc: GruEncoder, traces, du_s: np.ndarray):
    """Backprop through :func:`encoder_forward`.

    Returns ``(grads, dX)`` with ``grads`` keyed ``gru{k}.{block}`` (including
    ``gru{k}.h0``).
    """
    du_s = np.asarray(du_s, dtype=DTYPE)
    single = du_s.ndim == 1
    if single:
        du_s = du_s[None]
    B = du_s.shape[0]
    n_layers = len(enc.cells)
    T = len(traces[0])
    grads = {}
    # gradient flowing into each step's output of the layer above
    d_out = [np.zeros((B, enc.cells[-1].n_u)) for _ in range(T)]
    d_out[-1] = du_s
    for k in range(n_layers - 1, -1, -1):
        cell = enc.cells[k]
        acc = {n: np.zeros_like(getattr(cell, n)) for n in GRU_PARAM_NAMES}
        d_in = [None] * T
        dh = np.zeros((B, cell.n_u))
        for t in range(T - 1, -1, -1):
            g, dx, dh = gru_step_backward(cell, traces[k][t], d_out[t] + dh)
            for n in GRU_PARAM_NAMES:
                acc[n] += g[n]
            d_in[t] = dx
        for n in GRU_PARAM_NAMES:
            grads[f"gru{k}.{n}"] = acc[n]
        grads[f"gru{k}.h0"] = dh.sum(axis=0)
        d_out = d_in
    dX = np.stack(d_out, axis=1)
    return grads, (dX[0] if single else dX)


def history_matrix(history, window: int, n_x: int) -> np.ndarray:
    """Stack ``(action, feedback)`` pairs into a ``(window, n_x)`` input, left-padded with zeros."""
    rows = []
    for action, feedback in list(history)[-window:]:
        a = action.a if isinstance(action, ActionVector) else np.asarray(action, dtype=DTYPE)
        row = np.concatenate([a, np.asarray(feedback, dtype=DTYPE)])
        if row.shape[0] != n_x:
            raise ShapeError(f"history entry has dim {row.shape[0]}, expected {n_x}")
        rows.append(row)
    X = np.zeros((window, n_x), dtype=DTYPE)
    if rows:
        X[window - len(rows):] = np.stack(rows)
    return X


def encode_short_term(enc: GruEncoder, history) -> np.ndarray:
    """Short-term interest ``u_s`` from the last ``T`` (action, feedback) pairs."""
    X = history_matrix(history, enc.window, enc.n_x)
    u_s, _ = encoder_forward(enc, X)
    return u_s


# ---------------------------------------------------------------------------
# long-term interest

class LongTermStats:
    """Running per-user statistics behind the long-term interest vector.

    Arrays carry a leading batch dimension so a whole population (or a batch of
    simulated sessions) is updated at once. The ten features are: positive rate
    per feedback type (3), genre distribution of clicked items (4), interaction
    count ``n / (n + count_scale)``, mean position of events within the user's
    time span, and mean per-event feedback score.
    """

    def __init__(self, batch: int = 1, n_tasks: int = 3, count_scale: float = 50.0):
        self.n_tasks = n_tasks
        self.count_scale = count_scale
        self.n = np.zeros(batch)
        self.pos = np.zeros((batch, n_tasks))
        self.genre_clicks = np.zeros((batch, N_GENRES))
        self.first_ts = np.zeros(batch)
        self.last_ts = np.zeros(batch)
        self.sum_dt = np.zeros(batch)
        self.score_sum = np.zeros(batch)

    def copy(self, rows=None) -> "LongTermStats":
        out = LongTermStats.__new__(LongTermStats)
        out.n_tasks, out.count_scale = self.n_tasks, self.count_scale
        for name in ("n", "pos", "genre_clicks", "first_ts", "last_ts", "sum_dt", "score_sum"):
            arr = getattr(self, name)
            setattr(out, name, (arr if rows is None else arr[rows]).copy())
        return out

    def update(self, feedback: np.ndarray, genre: np.ndarray, ts: np.ndarray, rows=None) -> None:
        """Add one event per selected row. ``feedback`` is ``(b, n_tasks)``."""
        rows = slice(None) if rows is None else rows
        fb = np.asarray(feedback, dtype=DTYPE)
        ts = np.asarray(ts, dtype=DTYPE)
        fresh = self.n[rows] == 0
        self.first_ts[rows] = np.where(fresh, ts, self.first_ts[rows])
        self.last_ts[rows] = ts
        self.sum_dt[rows] += ts - self.first_ts[rows]
        self.n[rows] += 1
        self.pos[rows] += fb
        gc = self.genre_clicks[rows]
        gc[np.arange(gc.shape[0]), np.asarray(genre)] += fb[:, 0]
        self.genre_clicks[rows] = gc
        self.score_sum[rows] += fb.mean(axis=1)

    def features(self) -> np.ndarray:
        n = self.n
        safe_n = np.maximum(n, 1.0)
        rates = self.pos / safe_n[:, None]
        clicks = self.genre_clicks.sum(axis=1)
        genre = self.genre_clicks / np.maximum(clicks, 1.0)[:, None]
        count = n / (n + self.count_scale)
        span = self.last_ts - self.first_ts
        recency = np.where(span > 0, (self.sum_dt / safe_n) / np.where(span > 0, span, 1.0), 0.0)
        score = self.score_sum / safe_n
        out = np.concatenate([rates, genre, count[:, None], recency[:, None], score[:, None]], axis=1)
        return np.where(n[:, None] > 0, out, 0.0)


def build_long_term(user_history, genre_of=None, n_tasks: int = 3, count_scale: float = 50.0) -> np.ndarray:
    """Long-term interest vector (dim 10) from all events of one user.

    ``user_history`` is an iterable of objects with ``feedback``, ``ts`` and
    ``item_id``; ``genre_of`` maps an item id to its genre bucket. Empty
    history gives the zero vector.
    """
    stats = LongTermStats(1, n_tasks, count_scale)
    for ev in user_history:
        genre = genre_of(ev.item_id) if genre_of is not None else 0
        stats.update(np.asarray(ev.feedback, dtype=DTYPE)[None], np.array([genre]), np.array([ev.ts]))
    if genre_of is None:
        # without a genre map the genre block stays empty
        stats.genre_clicks[:] = 0.0
    return stats.features()[0]


# ---------------------------------------------------------------------------
# context and full state

def context_vector(ts_ms, region, n_regions: int = 4) -> np.ndarray:
    """``(hour / 24, day_of_week / 7, region / n_regions)`` for scalar or array inputs."""
    ts_ms = np.asarray(ts_ms, dtype=np.int64)
    hour = (ts_ms // 3_600_000) % 24
    dow = (ts_ms // 86_400_000) % 7
    return np.stack([hour / 24.0, dow / 7.0, np.asarray(region) / n_regions], axis=-1).astype(DTYPE)


@dataclass
class StateVector:
    u_s: np.ndarray
    u_l: np.ndarray
    u_c: np.ndarray
    s: np.ndarray = field(init=False)

    def __post_init__(self):
        self.s = np.concatenate([self.u_s, self.u_l, self.u_c], axis=-1)

    @property
    def dim(self) -> int:
        return self.s.shape[-1]


def build_state(u_s, u_l, u_c, dims=(10, N_LONG_TERM, N_CONTEXT)) -> StateVector:
    parts = [np.asarray(p, dtype=DTYPE) for p in (u_s, u_l, u_c)]
    for name, p, want in zip(("short-term", "long-term", "context"), parts, dims):
        if want is not None and p.shape[-1] != want:
            raise ShapeError(f"{name} part: expected dim {want}, got {p.shape[-1]}")
    return StateVector(*parts)


def split_state(s: np.ndarray, dims=(10, N_LONG_TERM, N_CONTEXT)):
    n_s, n_l, _ = dims
    return s[..., :n_s], s[..., n_s:n_s + n_l], s[..., n_s + n_l:]


@dataclass
class StateInput:
    """Raw inputs a network turns into a state vector.

    ``history`` is ``(T, N_x)`` (or batched ``(B, T, N_x)``), or ``None`` when the
    network has no recurrent encoder (tabular mode). ``long_term`` and
    ``context`` are passed through unchanged.
    """

    history: np.ndarray | None
    long_term: np.ndarray
    context: np.ndarray

    @property
    def batched(self) -> bool:
        return self.long_term.ndim == 2

    def __len__(self):
        return self.long_term.shape[0] if self.batched else 1


def stack_inputs(inputs) -> StateInput:
    inputs = list(inputs)
    hist = None if inputs[0].history is None else np.stack([i.history for i in inputs])
    return StateInput(hist, np.stack([i.long_term for i in inputs]), np.stack([i.context for i in inputs]))


def take_inputs(batch: StateInput, idx) -> StateInput:
    return StateInput(None if batch.history is None else batch.history[idx],
                      batch.long_term[idx], batch.context[idx])


def unstack_inputs(batch: StateInput) -> list:
    return [take_inputs(batch, k) for k in range(len(batch))]
