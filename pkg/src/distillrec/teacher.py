"""Per-task DDQN teacher: Q network, replay buffer, targets, loss and training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .nnkit import (
    DTYPE,
    DenseLayer,
    ParameterError,
    ShapeError,
    TrainingError,
    adam_init,
    adam_step,
    decayed_lr,
    glorot_uniform,
    mlp_backward,
    mlp_forward,
    sgd_step,
)
from .representation import (
    StateInput,
    encoder_backward,
    encoder_forward,
    encoder_view,
    init_encoder_params,
    stack_inputs,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherDims:
    action_dim: int = 49
    n_tasks: int = 3
    n_u: int = 10
    n_gru: int = 3
    window: int = 3
    n_long: int = 10
    n_ctx: int = 3
    hidden: tuple = (64, 32, 16)
    use_encoder: bool = True

    @property
    def n_x(self) -> int:
        return self.action_dim + self.n_tasks

    @property
    def state_dim(self) -> int:
        return (self.n_u if self.use_encoder else 0) + self.n_long + self.n_ctx

    @property
    def head_widths(self) -> list:
        return [self.state_dim + self.action_dim, *self.hidden, 1]

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherDims":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def tabular_dims(n_states: int, n_actions: int, hidden=(64, 32, 16)) -> TeacherDims:
    """Dims for a teacher on one-hot tabular states/actions (no recurrent encoder)."""
    return TeacherDims(action_dim=n_actions, n_tasks=1, n_long=n_states, n_ctx=0, hidden=tuple(hidden),
                       use_encoder=False)


class TeacherNet:
    """Parameters of one teacher: optional stacked-GRU encoder plus a dense Q head.

    ``params`` maps block names (``gru{k}.{W_xz,...,h0}``, ``q{k}.W``, ``q{k}.b``)
    to float64 arrays. ``frozen`` names blocks that receive no updates.
    """

    def __init__(self, params: dict, dims: TeacherDims, frozen=()):
        self.params = params
        self.dims = dims
        self.frozen = set(frozen)
        self.head_evals = 0
        self.encoder_evals = 0
        n_layers = len(dims.head_widths) - 1
        for k in range(n_layers):
            want = (dims.head_widths[k], dims.head_widths[k + 1])
            if params[f"q{k}.W"].shape != want:
                raise ShapeError(f"q{k}.W: expected {want}, got {params[f'q{k}.W'].shape}")

    @classmethod
    def init(cls, dims: TeacherDims, rng: np.random.Generator, h0_std: float = 0.01,
             train_h0: bool = False) -> "TeacherNet":
        params = {}
        if dims.use_encoder:
            params.update(init_encoder_params(rng, dims.n_x, dims.n_u, dims.n_gru, h0_std))
        widths = dims.head_widths
        for k in range(len(widths) - 1):
            params[f"q{k}.W"] = glorot_uniform(rng, widths[k], widths[k + 1])
            params[f"q{k}.b"] = np.zeros(widths[k + 1], dtype=DTYPE)
        frozen = () if train_h0 or not dims.use_encoder else {f"gru{k}.h0" for k in range(dims.n_gru)}
        return cls(params, dims, frozen)

    @property
    def encoder(self):
        return encoder_view(self.params, self.dims.n_gru, self.dims.window)

    @property
    def head(self) -> list:
        n = len(self.dims.head_widths) - 1
        return [DenseLayer(self.params[f"q{k}.W"], self.params[f"q{k}.b"],
                           "identity" if k == n - 1 else "relu") for k in range(n)]

    def trainable(self) -> list:
        return [k for k in self.params if k not in self.frozen]

    def freeze_encoder(self) -> None:
        self.frozen |= {k for k in self.params if k.startswith("gru")}

    def copy(self) -> "TeacherNet":
        return TeacherNet({k: v.copy() for k, v in self.params.items()}, self.dims, self.frozen)

    def load_from(self, other: "TeacherNet") -> None:
        for k, v in other.params.items():
            self.params[k][...] = v


# ---------------------------------------------------------------------------
# forward passes

def _as_batch(s: StateInput) -> tuple:
    if s.batched:
        return s, False
    hist = None if s.history is None else s.history[None]
    return StateInput(hist, s.long_term[None], s.context[None]), True


def encode_states(net: TeacherNet, inputs: StateInput):
    """State vectors ``concat(u_s, u_l, u_c)`` for a batch of raw inputs, plus the encoder traces."""
    traces = None
    parts = []
    if net.dims.use_encoder:
        if inputs.history is None:
            raise ShapeError("this teacher needs interaction histories")
        u_s, traces = encoder_forward(net.encoder, inputs.history)
        net.encoder_evals += len(inputs)
        parts.append(u_s)
    parts += [inputs.long_term, inputs.context]
    S = np.concatenate(parts, axis=1)
    if S.shape[1] != net.dims.state_dim:
        raise ShapeError(f"state dim {S.shape[1]} != configured {net.dims.state_dim}")
    return S, traces


def head_forward(net: TeacherNet, S: np.ndarray, A: np.ndarray):
    X = np.concatenate([S, A], axis=1)
    if X.shape[1] != net.dims.head_widths[0]:
        raise ShapeError(f"Q head input dim {X.shape[1]} != {net.dims.head_widths[0]}")
    net.head_evals += X.shape[0]
    out, cache = mlp_forward(net.head, X)
    return out[:, 0], cache


def score_states(net: TeacherNet, S: np.ndarray, catalog: np.ndarray) -> np.ndarray:
    """Q for every (state row, catalog item) pair: ``(B, |A|)``."""
    B, n = S.shape[0], catalog.shape[0]
    if n == 0:
        raise ParameterError("empty catalog")
    Srep = np.repeat(S, n, axis=0)
    Arep = np.tile(catalog, (B, 1))
    q, _ = head_forward(net, Srep, Arep)
    return q.reshape(B, n)


def q_scores(net: TeacherNet, s: StateInput, catalog: np.ndarray) -> np.ndarray:
    """Q of every catalog item at state(s) ``s``; 1-D for a single state."""
    batch, single = _as_batch(s)
    S, _ = encode_states(net, batch)
    Q = score_states(net, S, np.asarray(catalog, dtype=DTYPE))
    return Q[0] if single else Q


def q_value(net: TeacherNet, s, a) -> float:
    """Scalar Q for one state and one action vector.

    ``s`` is either a :class:`StateInput` or an already-built state vector.
    """
    a = np.asarray(getattr(a, "a", a), dtype=DTYPE)
    if isinstance(s, StateInput):
        S, _ = encode_states(net, _as_batch(s)[0])
    else:
        S = np.asarray(getattr(s, "s", s), dtype=DTYPE)[None]
    q, _ = head_forward(net, S, a[None])
    return float(q[0])


def select_action(net: TeacherNet, s: StateInput, catalog: np.ndarray, epsilon: float,
                  rng: np.random.Generator):
    """Epsilon-greedy choice over the catalog; greedy ties go to the lowest index."""
    catalog = np.asarray(catalog, dtype=DTYPE)
    if len(catalog) == 0:
        raise ParameterError("empty catalog")
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        k = int(rng.integers(len(catalog)))
    else:
        k = int(np.argmax(q_scores(net, s, catalog)))
    return k, catalog[k]


def ddqn_targets(current: TeacherNet, target: TeacherNet, rewards, next_inputs: StateInput,
                 catalog: np.ndarray, gamma: float, terminals) -> np.ndarray:
    """Double-DQN targets: the current net picks the next action, the target net values it."""
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"gamma must lie in [0, 1], got {gamma}")
    catalog = np.asarray(catalog, dtype=DTYPE)
    if len(catalog) == 0:
        raise ParameterError("empty catalog")
    rewards = np.asarray(rewards, dtype=DTYPE)
    terminals = np.asarray(terminals, dtype=bool)
    if gamma == 0.0 or np.all(terminals):
        return rewards.copy()
    S_cur, _ = encode_states(current, next_inputs)
    best = np.argmax(score_states(current, S_cur, catalog), axis=1)
    S_tgt, _ = encode_states(target, next_inputs)
    q_next, _ = head_forward(target, S_tgt, catalog[best])
    return rewards + np.where(terminals, 0.0, gamma * q_next)


def ddqn_target(current: TeacherNet, target: TeacherNet, r, s_next: StateInput, catalog,
                gamma: float, terminal: bool) -> float:
    batch, _ = _as_batch(s_next)
    return float(ddqn_targets(current, target, [r], batch, catalog, gamma, [terminal])[0])


# ---------------------------------------------------------------------------
# replay buffer and loss

@dataclass
class Experience:
    s: StateInput
    a: np.ndarray
    r: int
    s_next: StateInput
    terminal: bool = False
    a_index: int = -1

    def __post_init__(self):
        if self.r not in (0, 1):
            raise ParameterError(f"reward must be 0 or 1, got {self.r}")


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ParameterError("replay capacity must be positive")
        self.capacity = capacity
        self._ring: list = []
        self.inserted = 0

    def __len__(self):
        return len(self._ring)

    def add(self, exp: Experience) -> None:
        if len(self._ring) < self.capacity:
            self._ring.append(exp)
        else:
            self._ring[self.inserted % self.capacity] = exp
        self.inserted += 1

    def items(self) -> list:
        """Contents from oldest to newest."""
        if len(self._ring) < self.capacity:
            return list(self._ring)
        start = self.inserted % self.capacity
        return self._ring[start:] + self._ring[:start]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self._ring:
            raise ParameterError("cannot sample from an empty replay buffer")
        return rng.integers(len(self._ring), size=n)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        return [self._ring[i] for i in self.sample_indices(n, rng)]


@dataclass
class ExperienceBatch:
    s: StateInput
    a: np.ndarray
    r: np.ndarray
    s_next: StateInput
    terminal: np.ndarray

    @classmethod
    def stack(cls, exps) -> "ExperienceBatch":
        exps = list(exps)
        if not exps:
            raise ParameterError("empty batch")
        return cls(stack_inputs(e.s for e in exps), np.stack([e.a for e in exps]),
                   np.array([e.r for e in exps], dtype=DTYPE), stack_inputs(e.s_next for e in exps),
                   np.array([e.terminal for e in exps], dtype=bool))


def squared_loss_and_grad(net: TeacherNet, inputs: StateInput, actions: np.ndarray, targets: np.ndarray):
    """``(1 / 2N) * sum (y - Q)^2`` and its gradient with the targets held constant."""
    N = len(targets)
    if N == 0:
        raise ParameterError("empty batch")
    S, traces = encode_states(net, inputs)
    q, cache = head_forward(net, S, np.asarray(actions, dtype=DTYPE))
    resid = np.asarray(targets, dtype=DTYPE) - q
    loss = 0.5 * float(resid @ resid) / N
    dq = (-resid / N)[:, None]
    layer_grads, dX = mlp_backward(net.head, cache, dq)
    grads = {}
    for k, (gW, gb) in enumerate(layer_grads):
        grads[f"q{k}.W"] = gW
        grads[f"q{k}.b"] = gb
    if net.dims.use_encoder:
        enc_grads, _ = encoder_backward(net.encoder, traces, dX[:, :net.dims.n_u])
        grads.update(enc_grads)
    return loss, {k: g for k, g in grads.items() if k not in net.frozen}


def teacher_loss_and_grad(net: TeacherNet, batch, target_net: TeacherNet, gamma: float, catalog: np.ndarray):
    """DDQN squared loss over a batch of experiences and its gradient w.r.t. ``net``."""
    if not isinstance(batch, ExperienceBatch):
        batch = ExperienceBatch.stack(batch)
    y = ddqn_targets(net, target_net, batch.r, batch.s_next, catalog, gamma, batch.terminal)
    return squared_loss_and_grad(net, batch.s, batch.a, y)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TeacherConfig:
    epochs: int = 10
    steps_per_epoch: int = 400
    buffer_size: int = 256
    batch_size: int = 64
    target_every: int = 20
    eta0: float = 0.01
    gamma: float = 0.6
    epsilon: float = 0.1
    epsilon_decay: bool = False
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    optimizer: str = "sgd"
    keep_states: bool = True

    def epsilon_at(self, step: int) -> float:
        if not self.epsilon_decay:
            return self.epsilon
        horizon = max(1, self.epochs * self.steps_per_epoch // 2)
        frac = min(1.0, step / horizon)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass
class TeacherResult:
    net: TeacherNet
    target: TeacherNet
    curve: list = field(default_factory=list)
    states: list = field(default_factory=list)
    steps: int = 0
    syncs: list = field(default_factory=list)


def train_teacher(env, config: TeacherConfig, net: TeacherNet, rng: np.random.Generator,
                  on_sync=None) -> TeacherResult:
    """Epsilon-greedy DDQN training against ``env`` (one task), one gradient step per interaction.

    ``env`` provides ``catalog``, ``observe()`` and ``step(index) -> (r, next_input, terminal)``.
    ``on_sync(step, net, target)`` is called right after each target-network refresh.
    """
    catalog = np.asarray(env.catalog, dtype=DTYPE)
    target = net.copy()
    buffer = ReplayBuffer(config.buffer_size)
    opt = adam_init(net.params) if config.optimizer == "adam" else None
    if config.optimizer not in ("adam", "sgd"):
        raise ParameterError(f"unknown optimizer {config.optimizer!r}")
    result = TeacherResult(net, target)
    step = 0
    for epoch in range(config.epochs):
        lr = decayed_lr(config.eta0, epoch)
        losses, rewards = [], []
        for _ in range(config.steps_per_epoch):
            s = env.observe()
            eps = config.epsilon_at(step)
            k, a = select_action(net, s, catalog, eps, rng)
            try:
                r, s_next, terminal = env.step(k)
            except Exception as exc:
                raise TrainingError(f"environment failed at epoch {epoch}, step {step}: {exc}") from exc
            buffer.add(Experience(s, a, int(r), s_next, bool(terminal), k))
            if config.keep_states:
                result.states.append(s)
            batch = ExperienceBatch.stack(buffer.sample(config.batch_size, rng))
            loss, grads = teacher_loss_and_grad(net, batch, target, config.gamma, catalog)
            ctx = f"teacher epoch {epoch}, step {step}"
            if opt is not None:
                adam_step(net.params, grads, opt, lr, ctx)
            else:
                sgd_step(net.params, grads, lr, ctx)
            step += 1
            if step % config.target_every == 0:
                target.load_from(net)
                result.syncs.append(step)
                if on_sync is not None:
                    on_sync(step, net, target)
            losses.append(loss)
            rewards.append(r)
        result.curve.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
                             "reward": float(np.mean(rewards)), "epsilon": config.epsilon_at(step)})
        log.info("teacher epoch %d: loss %.4f reward %.3f", epoch, result.curve[-1]["loss"],
                 result.curve[-1]["reward"])
    result.steps = step
    return result


def greedy_policy(net: TeacherNet, inputs, catalog) -> np.ndarray:
    """Greedy action index for each state in ``inputs`` (a batched :class:`StateInput`)."""
    return np.argmax(q_scores(net, inputs, catalog), axis=-1)

