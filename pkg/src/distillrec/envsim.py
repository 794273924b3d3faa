"""Simulated multi-feedback users, tabular MDP fixtures and interaction logs.

Two environment flavours share one interface for the teacher trainer:

* tabular MDPs with explicit transition/reward tables (exact oracles exist),
* a featurized population of simulated users reacting to item vectors with a
  dependent click -> install -> play feedback chain.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nnkit import DTYPE, ParameterError, sigmoid
from .representation import (
    N_GENRES,
    BlockDims,
    Catalog,
    LongTermStats,
    StateInput,
    context_vector,
    take_inputs,
)

FEEDBACK_NAMES = ("click", "install", "play")

WARMUP_T0 = 1_537_401_600_000  # warm-up logs start here (ms epoch)
CAMPAIGN_T0 = 1_540_000_000_000
CAMPAIGN_SPAN = 35 * 86_400_000


class FeedbackChainError(ValueError):
    pass


class LogFormatError(ValueError):
    pass


class OrderingError(ValueError):
    pass


def feedback_name(i: int) -> str:
    return FEEDBACK_NAMES[i] if i < len(FEEDBACK_NAMES) else f"feedback{i}"


def validate_feedback(feedback, n_tasks: int | None = None) -> np.ndarray:
    """Check a feedback vector is binary and monotone (click >= install >= play)."""
    fb = np.asarray(feedback)
    if fb.ndim != 1 or (n_tasks is not None and fb.shape[0] != n_tasks):
        raise FeedbackChainError(f"feedback must be a list of {n_tasks} binary values, got {feedback!r}")
    if not np.all((fb == 0) | (fb == 1)):
        raise FeedbackChainError(f"feedback entries must be 0 or 1, got {feedback!r}")
    for i in range(1, fb.shape[0]):
        if fb[i] > fb[i - 1]:
            raise FeedbackChainError(
                f"monotone feedback chain violated: {feedback_name(i)}=1 but {feedback_name(i - 1)}=0"
            )
    return fb.astype(np.int64)


# ---------------------------------------------------------------------------
# tabular MDPs

@dataclass
class TabularMdp:
    """Per-task tables: ``transition[i, s, a, s']`` and expected reward ``reward[i, s, a]`` in [0, 1]."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float = 0.6

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=DTYPE)
        self.reward = np.asarray(self.reward, dtype=DTYPE)
        if self.transition.ndim == 3:
            self.transition = self.transition[None]
        if self.reward.ndim == 2:
            self.reward = self.reward[None]
        n_tasks, S, A, S2 = self.transition.shape
        if S != S2 or self.reward.shape != (n_tasks, S, A):
            raise ParameterError(f"inconsistent MDP shapes {self.transition.shape} / {self.reward.shape}")
        if np.any(self.transition < 0) or np.any(self.transition > 1):
            raise ParameterError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(self.transition.sum(axis=-1) - 1.0)) > 1e-10:
            raise ParameterError("transition rows must sum to 1")
        if np.any(self.reward < 0) or np.any(self.reward > 1):
            raise ParameterError("expected rewards must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError(f"discount must lie in [0, 1], got {self.gamma}")

    @property
    def n_tasks(self) -> int:
        return self.transition.shape[0]

    @property
    def n_states(self) -> int:
        return self.transition.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[2]


def tabular_sample(mdp: TabularMdp, task: int, s: int, a: int, rng: np.random.Generator):
    """Draw ``(reward, next_state)`` for one transition."""
    if not 0 <= task < mdp.n_tasks:
        raise IndexError(f"task {task} out of range")
    if not 0 <= s < mdp.n_states:
        raise IndexError(f"state {s} out of range")
    if not 0 <= a < mdp.n_actions:
        raise IndexError(f"action {a} out of range")
    p = mdp.reward[task, s, a]
    r = int(rng.random() < p) if 0.0 < p < 1.0 else int(p)
    s_next = int(rng.choice(mdp.n_states, p=mdp.transition[task, s, a]))
    return r, s_next


FIXTURES = ("single-loop", "two-state-switch", "random-6x4", "chain-5x2")


def make_fixture_mdp(name: str, gamma: float = 0.6) -> TabularMdp:
    """Small deterministic MDPs used as oracle fixtures.

    ``single-loop``       1 state, 1 action, reward 1, self-loop.
    ``two-state-switch``  2 states, 2 actions, every action swaps state; reward 1 only for action 0 in state 0.
    ``random-6x4``        6 states, 4 actions, seeded one-hot transitions, binary rewards with 3 nested tasks.
    ``chain-5x2``         5-state chain; action 1 moves right, action 0 resets; reward only at the far end.

    All fixtures are deterministic: transitions are one-hot and rewards are 0 or 1.
    """
    if name == "single-loop":
        return TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), gamma)
    if name == "two-state-switch":
        P = np.zeros((2, 2, 2))
        P[0, :, 1] = 1.0
        P[1, :, 0] = 1.0
        R = np.zeros((2, 2))
        R[0, 0] = 1.0
        return TabularMdp(P, R, gamma)
    if name == "random-6x4":
        rng = np.random.default_rng(20181020)
        S, A = 6, 4
        P = np.eye(S)[rng.integers(S, size=(S, A))]
        click = (rng.random((S, A)) < 0.5).astype(DTYPE)
        install = click * (rng.random((S, A)) < 0.6)
        play = install * (rng.random((S, A)) < 0.6)
        return TabularMdp(np.stack([P, P, P]), np.stack([click, install, play]), gamma)
    if name == "chain-5x2":
        S = 5
        P = np.zeros((S, 2, S))
        R = np.zeros((S, 2))
        for s in range(S):
            P[s, 0, 0] = 1.0
            P[s, 1, min(s + 1, S - 1)] = 1.0
        R[S - 1, 1] = 1.0
        return TabularMdp(P, R, gamma)
    raise ParameterError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")


class TabularTaskEnv:
    """One task of a tabular MDP behind the trainer interface.

    States and actions are one-hot encoded. Sessions of ``session_len`` steps
    restart from a uniformly random state; the cut is a truncation, not a
    terminal state, so bootstrapping continues through it.
    """

    def __init__(self, mdp: TabularMdp, task: int = 0, rng=None, session_len: int = 20):
        self.mdp = mdp
        self.task = task
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.session_len = session_len
        self.catalog = np.eye(mdp.n_actions)
        self._reset()

    def _reset(self):
        self.s = int(self.rng.integers(self.mdp.n_states))
        self.t = 0

    def encode(self, s: int) -> StateInput:
        return StateInput(None, np.eye(self.mdp.n_states)[s], np.zeros(0))

    def observe(self) -> StateInput:
        return self.encode(self.s)

    def step(self, action: int):
        r, s_next = tabular_sample(self.mdp, self.task, self.s, int(action), self.rng)
        self.s = s_next
        self.t += 1
        nxt = self.encode(s_next)
        if self.t >= self.session_len:
            self._reset()
        return r, nxt, False


# ---------------------------------------------------------------------------
# featurized users

@dataclass
class WorldParams:
    n_users: int = 200
    n_tasks: int = 3
    n_regions: int = 4
    session_len: int = 20
    genre_scale: float = 1.0
    taste_scale: float = 0.15
    appeal_weight: tuple = (1.2, 1.0, 1.0)
    bias: tuple = (-1.0, 0.0, 0.0)
    cond_rates: tuple = (0.6, 0.7)
    drift_rate: float = 0.3
    drift_gain: float = 1.0
    hour_amplitude: float = 0.3
    step_ms: int = 30_000


@dataclass
class SimUser:
    affinity: np.ndarray  # (n_tasks, action_dim)
    bias: np.ndarray  # (n_tasks,)
    cond_rates: np.ndarray  # (n_tasks - 1,)
    drift_rate: float
    drift_gain: float = 1.0
    region: int = 0
    seed: int = 0
    hour_amplitude: float = 0.0

    def __post_init__(self):
        self.cond_rates = np.asarray(self.cond_rates, dtype=DTYPE)
        if np.any(self.cond_rates < 0) or np.any(self.cond_rates > 1):
            raise ParameterError("conditional engagement rates must lie in [0, 1]")
        if not np.all(np.isfinite(self.affinity)):
            raise ParameterError("affinity vectors must be finite")


@dataclass
class SessionContext:
    drift: np.ndarray
    ts: int = CAMPAIGN_T0
    step: int = 0


def engagement_probs(affinity, bias, cond_rates, drift, actions, hour_shift=0.0):
    """Per-stage probabilities ``(p_click, p_install|click, p_play|install, ...)``.

    Shapes: affinity ``(B, F, D)``, bias ``(B, F)``, cond_rates ``(B, F-1)``,
    drift ``(B, D)``, actions ``(B, K, D)``; result ``(B, K, F)``.
    """
    scores = np.einsum("bkd,bfd->bkf", actions, affinity) + bias[:, None, :]
    scores[:, :, 0] += np.einsum("bkd,bd->bk", actions, drift) + np.asarray(hour_shift)[..., None]
    p = sigmoid(scores)
    p[:, :, 1:] *= cond_rates[:, None, :]
    return p


def sample_feedback(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample a monotone feedback chain from stage-wise conditional probabilities."""
    u = rng.random(probs.shape)
    hits = (u < probs).astype(np.int64)
    return np.cumprod(hits, axis=-1)


def _drift_mask(dims: BlockDims) -> np.ndarray:
    mask = np.zeros(dims.total)
    start = dims.offsets()["v_p"].start
    mask[start:start + N_GENRES] = 1.0
    return mask


def drift_update(drift, actions, feedback, rate, gain, mask):
    """Move short-term affinity toward the genre of every clicked item, slot by slot."""
    d = drift.copy()
    for j in range(actions.shape[1]):
        clicked = feedback[:, j, 0][:, None].astype(bool)
        target = gain[:, None] * mask * actions[:, j]
        d = np.where(clicked, (1.0 - rate[:, None]) * d + rate[:, None] * target, d)
    return d


def hour_shift(ts, amplitude):
    hour = (np.asarray(ts, dtype=np.int64) // 3_600_000) % 24
    return amplitude * np.sin(2.0 * np.pi * hour / 24.0)


def env_step(user: SimUser, ctx: SessionContext, actions, rng: np.random.Generator,
             dims: BlockDims = BlockDims(), step_ms: int = 30_000):
    """React to the displayed items; returns one feedback vector per item and the next context."""
    acts = np.stack([getattr(a, "a", a) for a in actions]) if not isinstance(actions, np.ndarray) else actions
    acts = np.atleast_2d(np.asarray(acts, dtype=DTYPE))
    shift = hour_shift(np.array([ctx.ts]), user.hour_amplitude)
    p = engagement_probs(user.affinity[None], user.bias[None], user.cond_rates[None],
                         ctx.drift[None], acts[None], shift)
    fb = sample_feedback(p, rng)
    drift = drift_update(ctx.drift[None], acts[None], fb, np.array([user.drift_rate]),
                         np.array([user.drift_gain]), _drift_mask(dims))[0]
    return fb[0], SessionContext(drift, ctx.ts + step_ms, ctx.step + 1)


@dataclass
class SessionBatch:
    users: np.ndarray
    drift: np.ndarray
    history: np.ndarray
    stats: LongTermStats
    ts: np.ndarray
    step: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.step is None:
            self.step = np.zeros(len(self.users), dtype=np.int64)

    def __len__(self):
        return len(self.users)


class FeaturizedWorld:
    """A population of simulated users over a fixed item catalog (vectorized over sessions)."""

    def __init__(self, catalog: Catalog, params: WorldParams = WorldParams(), seed: int = 0,
                 window: int = 3, fill_feedback_block: bool = True):
        self.catalog = catalog
        self.params = params
        self.window = window
        self.dims = catalog.dims
        rng = np.random.default_rng(seed)
        U, F, D = params.n_users, params.n_tasks, self.dims.total
        offs = self.dims.offsets()
        vd, vp = offs["v_d"], offs["v_p"].start
        genre = slice(vp, vp + N_GENRES)
        n_appeal = self.dims.p - N_GENRES
        appeal_w = list(params.appeal_weight) + [1.0] * max(0, F - len(params.appeal_weight))

        aff = np.zeros((U, F, D))
        pref = rng.normal(0.0, params.genre_scale, size=(U, N_GENRES))
        aff[:, 0, vd] = rng.normal(0.0, params.taste_scale, size=(U, self.dims.d))
        aff[:, 0, genre] = pref
        for i in range(F):
            j = vp + N_GENRES + min(i, n_appeal - 1)
            aff[:, i, j] += appeal_w[i] * (1.0 + 0.2 * rng.normal(size=U))
            if i > 0:
                aff[:, i, genre] = 0.5 * pref
                aff[:, i, vp + N_GENRES] += 0.3
        bias = np.array(list(params.bias) + [0.0] * max(0, F - len(params.bias)))[:F]
        self.affinity = aff
        self.bias = bias[None, :] + rng.normal(0.0, 0.2, size=(U, F))
        rates = np.array(list(params.cond_rates) + [0.7] * max(0, F - 1 - len(params.cond_rates)))[:F - 1]
        self.cond_rates = np.broadcast_to(rates, (U, F - 1)).copy()
        self.region = rng.integers(params.n_regions, size=U)
        self.user_seed = rng.integers(2**31, size=U)
        self.user_ids = [f"user{u:05d}" for u in range(U)]
        self.user_index = {uid: u for u, uid in enumerate(self.user_ids)}
        self.drift_mask = _drift_mask(self.dims)
        self.base_stats = LongTermStats(U, F)
        if fill_feedback_block and not np.any(catalog.actions[:, offs["v_h"]]):
            self._fill_feedback_block(rng)

    @property
    def n_tasks(self) -> int:
        return self.params.n_tasks

    @property
    def n_x(self) -> int:
        return self.dims.total + self.n_tasks

    def population_rates(self) -> np.ndarray:
        """Expected per-item rate of each feedback type over the user population (no drift)."""
        U = self.params.n_users
        acts = np.broadcast_to(self.catalog.actions, (U,) + self.catalog.actions.shape)
        p = engagement_probs(self.affinity, self.bias, self.cond_rates, np.zeros((U, self.dims.total)), acts)
        return np.cumprod(p, axis=-1).mean(axis=0)

    def _fill_feedback_block(self, rng):
        rates = self.population_rates()
        F, h = self.n_tasks, self.dims.h
        v_h = np.zeros((len(self.catalog), h))
        for j in range(h):
            window = j // F
            v_h[:, j] = rates[:, j % F] + rng.normal(0.0, 0.01 * (window + 1), size=len(self.catalog))
        self.catalog.set_feedback_block(v_h)

    def user(self, u: int) -> SimUser:
        return SimUser(self.affinity[u], self.bias[u], self.cond_rates[u], self.params.drift_rate,
                       self.params.drift_gain, int(self.region[u]), int(self.user_seed[u]),
                       self.params.hour_amplitude)

    def attach_history(self, events) -> None:
        """Set every user's long-term statistics from logged events (unknown users are ignored)."""
        stats = LongTermStats(self.params.n_users, self.n_tasks)
        for ev in events:
            u = self.user_index.get(ev.user_id)
            k = self.catalog.index.get(ev.item_id)
            if u is None or k is None:
                continue
            stats.update(np.asarray(ev.feedback, dtype=DTYPE)[None], np.array([self.catalog.genres[k]]),
                         np.array([ev.ts]), rows=np.array([u]))
        self.base_stats = stats

    def start_sessions(self, users, rng: np.random.Generator, start_ts=None) -> SessionBatch:
        users = np.asarray(users, dtype=np.int64)
        B = len(users)
        if start_ts is None:
            start_ts = CAMPAIGN_T0 + rng.integers(CAMPAIGN_SPAN, size=B)
        return SessionBatch(
            users=users,
            drift=np.zeros((B, self.dims.total)),
            history=np.zeros((B, self.window, self.n_x)),
            stats=self.base_stats.copy(users),
            ts=np.asarray(start_ts, dtype=np.int64).copy(),
        )

    def observe(self, batch: SessionBatch) -> StateInput:
        ctx = context_vector(batch.ts, self.region[batch.users], self.params.n_regions)
        return StateInput(batch.history.copy(), batch.stats.features(), ctx)

    def step(self, batch: SessionBatch, actions, rng: np.random.Generator) -> np.ndarray:
        """Show ``actions`` (item indices, shape ``(B, K)``) and return feedback ``(B, K, n_tasks)``."""
        actions = np.asarray(actions, dtype=np.int64).reshape(len(batch), -1)
        acts = self.catalog.actions[actions]
        u = batch.users
        shift = hour_shift(batch.ts, self.params.hour_amplitude)
        p = engagement_probs(self.affinity[u], self.bias[u], self.cond_rates[u], batch.drift, acts, shift)
        fb = sample_feedback(p, rng)
        rate = np.full(len(batch), self.params.drift_rate)
        gain = np.full(len(batch), self.params.drift_gain)
        batch.drift = drift_update(batch.drift, acts, fb, rate, gain, self.drift_mask)
        for j in range(actions.shape[1]):
            x = np.concatenate([acts[:, j], fb[:, j].astype(DTYPE)], axis=1)
            batch.history = np.concatenate([batch.history[:, 1:], x[:, None]], axis=1)
            batch.stats.update(fb[:, j], self.catalog.genres[actions[:, j]], batch.ts)
        batch.ts = batch.ts + self.params.step_ms
        batch.step = batch.step + 1
        return fb


class FeaturizedTaskEnv:
    """One task of the featurized world behind the trainer interface.

    In ``multi`` mode every step shows one item per task; the trained task fills
    its own slot and the other slots are drawn uniformly. ``single`` mode shows
    just the chosen item.
    """

    def __init__(self, world: FeaturizedWorld, task: int = 0, rng=None, action_mode: str = "multi",
                 terminal_at_end: bool = True):
        if action_mode not in ("multi", "single"):
            raise ParameterError(f"unknown action mode {action_mode!r}")
        self.world = world
        self.task = task
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.action_mode = action_mode
        self.terminal_at_end = terminal_at_end
        self.catalog = world.catalog.actions
        self._new_session()

    def _new_session(self):
        u = self.rng.integers(self.world.params.n_users, size=1)
        self.batch = self.world.start_sessions(u, self.rng)

    def observe(self) -> StateInput:
        return take_inputs(self.world.observe(self.batch), 0)

    def step(self, action: int):
        if self.action_mode == "multi":
            acts = self.rng.integers(len(self.catalog), size=self.world.n_tasks)
            acts[self.task] = action
            slot = self.task
        else:
            acts = np.array([action])
            slot = 0
        fb = self.world.step(self.batch, acts[None], self.rng)
        r = int(fb[0, slot, self.task])
        nxt = self.observe()
        terminal = False
        if self.batch.step[0] >= self.world.params.session_len:
            terminal = self.terminal_at_end
            self._new_session()
        return r, nxt, terminal


# ---------------------------------------------------------------------------
# interaction logs

@dataclass
class LogEvent:
    user_id: str
    ts: int
    item_id: str
    feedback: tuple
    context: dict

    def to_json(self) -> str:
        return json.dumps({"user_id": self.user_id, "ts": self.ts, "item_id": self.item_id,
                           "feedback": list(self.feedback), "context": self.context})


def _parse_event(rec, lineno: int, n_tasks: int | None) -> LogEvent:
    if not isinstance(rec, dict):
        raise LogFormatError(f"line {lineno}: expected an object")
    for key, typ in (("user_id", str), ("ts", int), ("item_id", str), ("feedback", list), ("context", dict)):
        if key not in rec:
            raise LogFormatError(f"line {lineno}: missing key {key!r}")
        if not isinstance(rec[key], typ) or (typ is int and isinstance(rec[key], bool)):
            raise LogFormatError(f"line {lineno}: key {key!r} has wrong type")
    try:
        fb = validate_feedback(rec["feedback"], n_tasks)
    except FeedbackChainError as exc:
        raise FeedbackChainError(f"line {lineno}: {exc}") from None
    for k, v in rec["context"].items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise LogFormatError(f"line {lineno}: context feature {k!r} is not a number")
    return LogEvent(rec["user_id"], rec["ts"], rec["item_id"], tuple(int(x) for x in fb), dict(rec["context"]))


def ingest_log(path, n_tasks: int | None = 3):
    """Yield validated :class:`LogEvent` records from a ``.jsonl`` file, in file order."""
    last_ts: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"line {lineno}: malformed record ({exc.msg})") from None
            ev = _parse_event(rec, lineno, n_tasks)
            prev = last_ts.get(ev.user_id)
            if prev is not None and ev.ts < prev:
                raise OrderingError(f"line {lineno}: timestamp {ev.ts} for {ev.user_id} precedes {prev}")
            last_ts[ev.user_id] = ev.ts
            yield ev


def write_log(events, path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")
            n += 1
    return n


def simulate_log(world: FeaturizedWorld, sessions_per_user: int, session_len: int,
                 rng: np.random.Generator, users=None) -> list:
    """Warm-up interaction log under a uniformly random single-item logging policy.

    Events are grouped by user and time-ordered within each user.
    """
    users = np.arange(world.params.n_users) if users is None else np.asarray(users)
    per_user = {int(u): [] for u in users}
    n_items = len(world.catalog)
    for s in range(sessions_per_user):
        start = WARMUP_T0 + s * 86_400_000 + rng.integers(86_400_000 - session_len * world.params.step_ms,
                                                          size=len(users))
        batch = world.start_sessions(users, rng, start_ts=start)
        for _ in range(session_len):
            ctx = context_vector(batch.ts, world.region[users], world.params.n_regions)
            ts = batch.ts.copy()
            acts = rng.integers(n_items, size=(len(users), 1))
            fb = world.step(batch, acts, rng)
            for b, u in enumerate(users):
                per_user[int(u)].append(LogEvent(
                    world.user_ids[u], int(ts[b]), world.catalog.item_ids[acts[b, 0]],
                    tuple(int(x) for x in fb[b, 0]),
                    {"hour": float(ctx[b, 0]), "dow": float(ctx[b, 1]), "region": float(ctx[b, 2])},
                ))
    return [ev for u in users for ev in per_user[int(u)]]
