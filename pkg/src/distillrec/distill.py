"""Multi-task policy distillation into a shared-trunk, multi-branch student.

Teachers score (state, item) pairs one at a time; the student maps a state to
a full vector of item scores per task. Softened teacher scores become target
distributions, and the student is fit by a weighted sum of per-task KL
divergences.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .nnkit import (
    DTYPE,
    DenseLayer,
    ParameterError,
    ShapeError,
    adam_init,
    adam_step,
    decayed_lr,
    glorot_uniform,
    mlp_backward,
    mlp_forward,
    sgd_step,
    softmax_tau,
)
from .representation import StateInput, encoder_forward, encoder_view, take_inputs
from .teacher import encode_states, score_states

log = logging.getLogger(__name__)

# q entries are clamped to this before taking the log in the KL divergence
EPS_PROB = 1e-12
SUM_TOL = 1e-10


@dataclass(frozen=True)
class StudentDims:
    state_dim: int = 23
    n_actions: int = 50
    n_tasks: int = 3
    trunk: tuple = (64, 32)
    branch: tuple = (32,)
    # frozen short-term encoder carried along for raw inputs (0 layers: none)
    n_x: int = 52
    n_u: int = 10
    n_gru: int = 3
    window: int = 3

    @property
    def use_encoder(self) -> bool:
        return self.n_gru > 0

    def trunk_widths(self) -> list:
        return [self.state_dim, *self.trunk]

    def branch_widths(self) -> list:
        return [self.trunk[-1] if self.trunk else self.state_dim, *self.branch, self.n_actions]

    @classmethod
    def from_teacher(cls, tdims, n_actions: int, trunk=(64, 32), branch=(32,), n_tasks=None) -> "StudentDims":
        return cls(state_dim=tdims.state_dim, n_actions=n_actions,
                   n_tasks=tdims.n_tasks if n_tasks is None else n_tasks, trunk=tuple(trunk),
                   branch=tuple(branch), n_x=tdims.n_x, n_u=tdims.n_u,
                   n_gru=tdims.n_gru if tdims.use_encoder else 0, window=tdims.window)

    @classmethod
    def from_dict(cls, d: dict) -> "StudentDims":
        d = dict(d)
        d["trunk"] = tuple(d["trunk"])
        d["branch"] = tuple(d["branch"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk"] = list(self.trunk)
        d["branch"] = list(self.branch)
        return d


class StudentNet:
    """Shared dense trunk followed by one dense branch per task.

    Blocks: ``trunk{k}.{W,b}``, ``branch{i}.{k}.{W,b}`` and, when an encoder
    is carried, ``enc.gru{k}.*`` (always frozen). There is a single copy of
    the trunk, so every branch sees the same trunk parameters.
    """

    def __init__(self, params: dict, dims: StudentDims):
        self.params = params
        self.dims = dims
        self.frozen = {k for k in params if k.startswith("enc.")}
        self.trunk_evals = 0
        tw = dims.trunk_widths()
        for k in range(len(tw) - 1):
            self._check(f"trunk{k}.W", (tw[k], tw[k + 1]))
        bw = dims.branch_widths()
        for i in range(dims.n_tasks):
            for k in range(len(bw) - 1):
                self._check(f"branch{i}.{k}.W", (bw[k], bw[k + 1]))

    def _check(self, name, shape):
        if name not in self.params:
            raise ShapeError(f"missing parameter block {name}")
        if self.params[name].shape != shape:
            raise ShapeError(f"{name}: expected {shape}, got {self.params[name].shape}")

    @classmethod
    def init(cls, dims: StudentDims, rng: np.random.Generator, encoder_params: dict | None = None) -> "StudentNet":
        params = {}
        tw = dims.trunk_widths()
        for k in range(len(tw) - 1):
            params[f"trunk{k}.W"] = glorot_uniform(rng, tw[k], tw[k + 1])
            params[f"trunk{k}.b"] = np.zeros(tw[k + 1], dtype=DTYPE)
        bw = dims.branch_widths()
        for i in range(dims.n_tasks):
            for k in range(len(bw) - 1):
                params[f"branch{i}.{k}.W"] = glorot_uniform(rng, bw[k], bw[k + 1])
                params[f"branch{i}.{k}.b"] = np.zeros(bw[k + 1], dtype=DTYPE)
        if encoder_params is not None:
            for k, v in encoder_params.items():
                if k.startswith("gru"):
                    params[f"enc.{k}"] = np.array(v, dtype=DTYPE)
        return cls(params, dims)

    @property
    def trunk(self) -> list:
        n = len(self.dims.trunk)
        return [DenseLayer(self.params[f"trunk{k}.W"], self.params[f"trunk{k}.b"], "relu") for k in range(n)]

    def branch(self, i: int) -> list:
        n = len(self.dims.branch) + 1
        return [DenseLayer(self.params[f"branch{i}.{k}.W"], self.params[f"branch{i}.{k}.b"],
                           "identity" if k == n - 1 else "relu") for k in range(n)]

    @property
    def has_encoder(self) -> bool:
        return any(k.startswith("enc.") for k in self.params)

    def trainable(self) -> list:
        return [k for k in self.params if k not in self.frozen]

    def copy(self) -> "StudentNet":
        return StudentNet({k: v.copy() for k, v in self.params.items()}, self.dims)


def _batch_of_one(s: StateInput) -> StateInput:
    return StateInput(None if s.history is None else s.history[None], s.long_term[None], s.context[None])


def student_states(student: StudentNet, inputs: StateInput) -> np.ndarray:
    """State vectors for raw inputs under the student's frozen encoder."""
    single = not inputs.batched
    batch = inputs if not single else _batch_of_one(inputs)
    parts = []
    if student.has_encoder:
        enc = encoder_view(student.params, student.dims.n_gru, student.dims.window, prefix="enc.")
        u_s, _ = encoder_forward(enc, batch.history)
        parts.append(u_s)
    S = np.concatenate(parts + [batch.long_term, batch.context], axis=1)
    return S[0] if single else S


def student_forward(student: StudentNet, S: np.ndarray, tasks=None):
    """Branch outputs ``(n_tasks, B, |A|)`` for state rows ``S`` and the cache for backprop."""
    S = np.asarray(S, dtype=DTYPE)
    if S.ndim != 2 or S.shape[1] != student.dims.state_dim:
        raise ShapeError(f"student expects states of dim {student.dims.state_dim}, got shape {S.shape}")
    tasks = range(student.dims.n_tasks) if tasks is None else tasks
    student.trunk_evals += S.shape[0]
    H, trunk_cache = mlp_forward(student.trunk, S)
    outs, branch_caches = [], []
    for i in tasks:
        out, cache = mlp_forward(student.branch(i), H)
        outs.append(out)
        branch_caches.append(cache)
    return np.stack(outs), (trunk_cache, branch_caches, list(tasks))


def student_backward(student: StudentNet, cache, d_out: np.ndarray) -> dict:
    """Parameter gradients given ``dL/d(branch outputs)`` of shape ``(n_tasks, B, |A|)``."""
    trunk_cache, branch_caches, tasks = cache
    grads = {}
    dH = None
    for j, i in enumerate(tasks):
        layer_grads, dh = mlp_backward(student.branch(i), branch_caches[j], d_out[j])
        for k, (gW, gb) in enumerate(layer_grads):
            grads[f"branch{i}.{k}.W"] = gW
            grads[f"branch{i}.{k}.b"] = gb
        dH = dh if dH is None else dH + dh
    layer_grads, _ = mlp_backward(student.trunk, trunk_cache, dH)
    for k, (gW, gb) in enumerate(layer_grads):
        grads[f"trunk{k}.W"] = gW
        grads[f"trunk{k}.b"] = gb
    return grads


# ---------------------------------------------------------------------------
# targets and samples

@dataclass
class DistillSample:
    """A state vector (under the student's encoder) and one target distribution per task."""

    s: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=DTYPE)
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=DTYPE))
        validate_targets(self.targets)
        if not np.all(np.isfinite(self.s)):
            raise ParameterError("distill state has non-finite entries")


def validate_targets(targets: np.ndarray) -> None:
    if not np.all(np.isfinite(targets)) or np.any(targets < 0) or np.any(targets > 1):
        raise ParameterError("target entries must be finite probabilities")
    err = np.abs(targets.sum(axis=-1) - 1.0).max()
    if err > SUM_TOL:
        raise ParameterError(f"target distribution sums differ from 1 by {err:.3e}")


def _soft_from_states(teachers, S_list, catalog, tau) -> np.ndarray:
    out = [softmax_tau(score_states(t, S, catalog), tau) for t, S in zip(teachers, S_list)]
    return np.stack(out, axis=1)


def teacher_soft_targets(teachers, s: StateInput, catalog, tau: float = 0.01) -> np.ndarray:
    """Softened Q vectors over the catalog, one row per teacher.

    Single state gives ``(n_tasks, |A|)``; a batch gives ``(B, n_tasks, |A|)``.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    catalog = np.asarray(catalog, dtype=DTYPE)
    if catalog.ndim != 2 or len(catalog) == 0:
        raise ParameterError("empty catalog")
    single = not s.batched
    batch = s if not single else _batch_of_one(s)
    S_list = [encode_states(t, batch)[0] for t in teachers]
    P = _soft_from_states(teachers, S_list, catalog, tau)
    return P[0] if single else P


def gen_distill_dataset(teachers, observed: StateInput, catalog, tau: float, rho: float,
                        rng: np.random.Generator, sigma_aug: float = 0.05, student_task: int = 0,
                        jobs: int = 1, chunk: int = 256) -> list:
    """Distillation samples for every observed state plus ``ceil(rho * n)`` perturbed ones.

    Perturbed states copy a uniformly drawn observed state and add Gaussian
    noise (std ``sigma_aug``) to the short-term and context components. Every
    teacher receives the same noise on its own short-term code. The stored
    state uses the short-term code of teacher ``student_task``, which is the
    encoder the student carries.
    """
    if rho < 0:
        raise ParameterError(f"augment fraction must be non-negative, got {rho}")
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    catalog = np.asarray(catalog, dtype=DTYPE)
    if len(catalog) == 0:
        raise ParameterError("empty catalog")
    n = len(observed)
    n_aug = math.ceil(rho * n)
    base = np.concatenate([np.arange(n), rng.integers(n, size=n_aug)]) if n else np.arange(0)
    dims = teachers[0].dims
    n_s = dims.n_u if dims.use_encoder else 0
    noise_s = rng.normal(0.0, sigma_aug, size=(n_aug, n_s))
    noise_c = rng.normal(0.0, sigma_aug, size=(n_aug, dims.n_ctx))

    def work(lo, hi):
        idx = base[lo:hi]
        S_list = []
        for t in teachers:
            S, _ = encode_states(t, take_inputs(observed, idx))
            S = S.copy()
            rows = np.nonzero(np.arange(lo, hi) >= n)[0]
            if len(rows):
                k = np.arange(lo, hi)[rows] - n
                S[rows, :n_s] += noise_s[k]
                S[rows, S.shape[1] - dims.n_ctx:] += noise_c[k]
            S_list.append(S)
        return S_list[student_task], _soft_from_states(teachers, S_list, catalog, tau)

    bounds = [(lo, min(lo + chunk, len(base))) for lo in range(0, len(base), chunk)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(lambda b: work(*b), bounds))
    else:
        parts = [work(*b) for b in bounds]
    samples = []
    for S, P in parts:
        for j in range(len(S)):
            samples.append(DistillSample(S[j], P[j]))
    return samples


def write_distill_dataset(samples, path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for smp in samples:
            fh.write(json.dumps({"state": smp.s.tolist(), "targets": smp.targets.tolist()}) + "\n")
            n += 1
    return n


def read_distill_dataset(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                out.append(DistillSample(rec["state"], rec["targets"]))
            except (KeyError, ParameterError) as exc:
                raise ParameterError(f"line {lineno}: {exc}") from None
    return out


def stack_samples(samples) -> tuple:
    samples = list(samples)
    return np.stack([s.s for s in samples]), np.stack([s.targets for s in samples])


# ---------------------------------------------------------------------------
# loss and gradient

def kl_divergence(p, q) -> float:
    """``sum p * ln(p / q)`` with ``q`` clamped below at 1e-12; terms with ``p == 0`` vanish."""
    p = np.asarray(p, dtype=DTYPE)
    q = np.asarray(q, dtype=DTYPE)
    if p.shape != q.shape:
        raise ShapeError(f"KL inputs differ in shape: {p.shape} vs {q.shape}")
    qc = np.maximum(q, EPS_PROB)
    pos = p > 0
    return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(qc[pos]))))


def log_softmax_tau(z, tau: float) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_lambdas(lambdas, n_tasks):
    lam = np.asarray(lambdas, dtype=DTYPE)
    if lam.shape != (n_tasks,):
        raise ShapeError(f"expected {n_tasks} task weights, got {lam.shape[0] if lam.ndim else 'a scalar'}")
    if np.any(lam < 0):
        raise ParameterError("task weights must be non-negative")
    return lam


def per_task_kl(P: np.ndarray, Z: np.ndarray, tau: float) -> np.ndarray:
    """Batch-mean KL per task between targets ``P (B, F, A)`` and softened outputs ``Z (F, B, A)``.

    The student side uses an exact log-softmax, so no clamp is needed there.
    """
    Pt = np.swapaxes(P, 0, 1)
    if Pt.shape != Z.shape:
        raise ShapeError(f"targets {Pt.shape} and student outputs {Z.shape} differ")
    logq = log_softmax_tau(Z, tau)
    plogp = np.where(Pt > 0, Pt * np.log(np.where(Pt > 0, Pt, 1.0)), 0.0)
    kl = (plogp - Pt * logq).sum(axis=-1)
    return kl.mean(axis=1)


def batch_loss_and_grad(student: StudentNet, S, P, tau: float, lambdas):
    """Weighted batch-mean distillation loss and its parameter gradient.

    The gradient w.r.t. branch ``i`` outputs is ``lambda_i * (q * sum(p) - p) / (tau * B)``.
    """
    S = np.asarray(S, dtype=DTYPE)
    P = np.asarray(P, dtype=DTYPE)
    if len(S) == 0:
        raise ParameterError("empty batch")
    lam = _check_lambdas(lambdas, student.dims.n_tasks)
    Z, cache = student_forward(student, S)
    kl = per_task_kl(P, Z, tau)
    loss = float(lam @ kl)
    Q = np.exp(log_softmax_tau(Z, tau))
    Pt = np.swapaxes(P, 0, 1)
    dZ = lam[:, None, None] * (Q * Pt.sum(axis=-1, keepdims=True) - Pt) / (tau * len(S))
    return loss, student_backward(student, cache, dZ), kl


def logit_grad_ratio_form(p, z, tau: float) -> np.ndarray:
    """Gradient of ``KL(p || softmax(z / tau))`` w.r.t. ``z`` written as ``-sum_k (p_k / q_k) dq_k/dz``.

    Kept as an independent cross-check of the fused ``(q * sum(p) - p) / tau`` form.
    """
    p = np.asarray(p, dtype=DTYPE)
    q = softmax_tau(z, tau)
    jac = (np.diag(q) - np.outer(q, q)) / tau
    # no clamp here: the clamp would bend the gradient wherever q underflows below it
    ratio = np.divide(p, q, out=np.zeros_like(p), where=p > 0)
    return -(ratio @ jac)


def student_loss(student: StudentNet, sample, tau: float = 0.01, lambdas=(0.25, 0.25, 0.5)) -> float:
    """Weighted multi-task KL for one :class:`DistillSample` (or the mean over a list)."""
    samples = [sample] if isinstance(sample, DistillSample) else list(sample)
    S, P = stack_samples(samples)
    lam = _check_lambdas(lambdas, student.dims.n_tasks)
    Z, _ = student_forward(student, S)
    return float(lam @ per_task_kl(P, Z, tau))


def student_grad_step(student: StudentNet, batch, tau: float, lambdas, lr: float, opt=None,
                      batch_index: int = 0) -> float:
    """One update on a batch of samples; ``opt`` is an Adam state or ``None`` for plain SGD.

    Returns the batch loss before the update.
    """
    batch = list(batch)
    if not batch:
        raise ParameterError("empty batch")
    S, P = stack_samples(batch)
    loss, grads, _ = batch_loss_and_grad(student, S, P, tau, lambdas)
    ctx = f"student batch {batch_index}"
    if opt is None:
        sgd_step(student.params, grads, lr, ctx)
    else:
        adam_step(student.params, grads, opt, lr, ctx)
    return loss


@dataclass
class LossTelemetry:
    """Accumulates the two parts of the pipeline objective: teacher losses and the distillation loss."""

    teacher: dict = field(default_factory=dict)
    distill_kl: np.ndarray | None = None
    lambdas: np.ndarray | None = None

    def record_teacher(self, task: int, loss: float) -> None:
        self.teacher[task] = float(loss)

    def record_distill(self, kl_per_task, lambdas) -> None:
        self.distill_kl = np.asarray(kl_per_task, dtype=DTYPE)
        self.lambdas = np.asarray(lambdas, dtype=DTYPE)

    @property
    def distill(self) -> float:
        return 0.0 if self.distill_kl is None else float(self.lambdas @ self.distill_kl)

    def total(self) -> float:
        return math.fsum(self.teacher.values()) + self.distill


# ---------------------------------------------------------------------------
# training loop

@dataclass
class StudentConfig:
    epochs: int = 10
    batch_size: int = 64
    eta0: float = 0.01
    tau: float = 0.01
    lambdas: tuple = (0.25, 0.25, 0.5)
    optimizer: str = "adam"
    smooth_window: int = 3


@dataclass
class StudentResult:
    net: StudentNet
    curve: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def smoothed(values, window: int = 3) -> list:
    """Trailing mean over up to ``window`` entries."""
    out = []
    for k in range(len(values)):
        lo = max(0, k - window + 1)
        out.append(float(np.mean(values[lo:k + 1])))
    return out


def train_student(dataset, config: StudentConfig, student: StudentNet, rng: np.random.Generator) -> StudentResult:
    """Shuffled mini-batch epochs over a fixed distillation dataset.

    After each epoch the full-dataset loss is recorded; a warning is logged
    when its trailing mean goes up.
    """
    dataset = list(dataset)
    if not dataset:
        raise ParameterError("empty distillation dataset")
    if config.optimizer not in ("adam", "sgd"):
        raise ParameterError(f"unknown optimizer {config.optimizer!r}")
    S_all, P_all = stack_samples(dataset)
    if P_all.shape[1] != student.dims.n_tasks or P_all.shape[2] != student.dims.n_actions:
        raise ShapeError(f"targets have shape {P_all.shape[1:]}, student produces "
                         f"{(student.dims.n_tasks, student.dims.n_actions)}")
    lam = _check_lambdas(config.lambdas, student.dims.n_tasks)
    opt = adam_init({k: student.params[k] for k in student.trainable()}) if config.optimizer == "adam" else None
    result = StudentResult(student)
    full = []
    n = len(dataset)
    batch_no = 0
    for epoch in range(config.epochs):
        lr = decayed_lr(config.eta0, epoch)
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads, _ = batch_loss_and_grad(student, S_all[idx], P_all[idx], config.tau, lam)
            ctx = f"student epoch {epoch}, batch {batch_no}"
            if opt is None:
                sgd_step(student.params, grads, lr, ctx)
            else:
                adam_step(student.params, grads, opt, lr, ctx)
            batch_losses.append(loss)
            batch_no += 1
        Z, _ = student_forward(student, S_all)
        kl = per_task_kl(P_all, Z, config.tau)
        full.append(float(lam @ kl))
        smooth = smoothed(full, config.smooth_window)
        result.curve.append({"epoch": epoch, "lr": lr, "batch_loss": float(np.mean(batch_losses)),
                             "loss": full[-1], "smoothed": smooth[-1], "kl": kl.tolist()})
        # rises at rounding level (a fully fitted dataset) are not reported
        if len(smooth) > 1 and smooth[-1] > smooth[-2] + 1e-12 * max(1.0, abs(smooth[-2])):
            msg = f"smoothed distillation loss rose at epoch {epoch}: {smooth[-2]:.6f} -> {smooth[-1]:.6f}"
            log.warning(msg)
            result.warnings.append(msg)
        log.info("student epoch %d: loss %.5f", epoch, full[-1])
    return result


def student_scores(student: StudentNet, s, task: int) -> np.ndarray:
    if not 0 <= task < student.dims.n_tasks:
        raise ParameterError(f"task {task} out of range for a student with {student.dims.n_tasks} branches")
    if isinstance(s, StateInput):
        s = student_states(student, s)
    S = np.asarray(s, dtype=DTYPE)
    single = S.ndim == 1
    Z, _ = student_forward(student, S[None] if single else S, tasks=[task])
    return Z[0, 0] if single else Z[0]


def student_policy(student: StudentNet, s, task: int) -> np.ndarray:
    """Catalog indices by descending branch score; ties keep the lower index first."""
    return np.argsort(-student_scores(student, s, task), axis=-1, kind="stable")
