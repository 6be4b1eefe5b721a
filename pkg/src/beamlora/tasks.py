"""Teacher-student tasks, adapter models and the training loop."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from beamlora import tensor as T
from beamlora.adapter import IMPORTANCE_MODES, LoraAdapter, init_adapter, rank_importance
from beamlora.beam import BeamController, BeamSchedule, OperationEvent
from beamlora.optim import AdamState, adam_step
from beamlora.tensor import Tensor

logger = logging.getLogger(__name__)

TRAIN_MODES = ("beamlora", "lora", "scored_lora", "prune_only", "random_select", "static_p")


@dataclass
class TaskConfig:
    """Planted low-rank update on top of a random frozen base.

    ``dims`` lists layer widths input-first, e.g. ``[32, 32]`` is a single
    32x32 linear layer and ``[32, 48, 16]`` a two-layer tanh MLP. Each layer
    gets its own planted update with spectrum ``sigmas``.
    """

    dims: list[int] = field(default_factory=lambda: [32, 32])
    sigmas: list[float] = field(default_factory=lambda: [4.0, 2.0, 1.0, 0.5, 0.05, 0.05, 0.05, 0.05])
    n_train: int = 128
    n_eval: int = 1024
    noise: float = 0.3
    base_std: float = 1.0
    loss: str = "mse"

    def validate(self) -> None:
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError(f"dims must list at least two positive widths, got {self.dims}")
        if len(self.sigmas) > min(min(self.dims[:-1]), min(self.dims[1:])):
            raise ValueError(f"planted rank {len(self.sigmas)} exceeds layer dimensions {self.dims}")
        if any(b > a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError(f"sigmas must be non-increasing, got {self.sigmas}")
        if self.n_train < 1 or self.n_eval < 1 or self.noise < 0:
            raise ValueError("n_train and n_eval must be positive and noise non-negative")
        if self.loss not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TeacherStudentTask:
    config: TaskConfig
    seed: int
    W0: list[np.ndarray]
    delta: list[np.ndarray]
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    @property
    def activation(self) -> str | None:
        return "tanh" if len(self.W0) > 1 else None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (*self.W0, *self.delta, self.x_train, self.y_train, self.x_eval, self.y_eval):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _orthonormal(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, m)))
    return q * np.sign(np.diag(r))


def planted_update(rng: np.random.Generator, d: int, k: int, sigmas) -> np.ndarray:
    m = len(sigmas)
    U, V = _orthonormal(rng, d, m), _orthonormal(rng, k, m)
    return (U * np.asarray(sigmas, dtype=np.float64)) @ V.T


def teacher_forward(weights: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    h = x
    for i, W in enumerate(weights):
        h = W @ h
        if i < len(weights) - 1:
            h = np.tanh(h)
    return h


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_teacher_student(config: TaskConfig, seed: int, dtype=None) -> TeacherStudentTask:
    """Deterministic data: ``x ~ N(0, I)``, ``y = teacher(x) + noise``.

    Classification tasks label each sample by the argmax of the noisy
    teacher output.
    """
    config.validate()
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng(_seeds(seed, 4)[0])
    W0, delta = [], []
    for k, d in zip(config.dims[:-1], config.dims[1:]):
        W0.append(rng.standard_normal((d, k)) * config.base_std / math.sqrt(k))
        delta.append(planted_update(rng, d, k, config.sigmas))
    teacher = [w + dw for w, dw in zip(W0, delta)]

    def draw(n):
        x = rng.standard_normal((config.dims[0], n))
        y = teacher_forward(teacher, x) + config.noise * rng.standard_normal((config.dims[-1], n))
        if config.loss == "cross_entropy":
            y = np.argmax(y, axis=0).astype(np.int64)
        return x.astype(dtype), y if y.dtype.kind == "i" else y.astype(dtype)

    x_train, y_train = draw(config.n_train)
    x_eval, y_eval = draw(config.n_eval)
    return TeacherStudentTask(config, seed, [w.astype(dtype) for w in W0], [dw.astype(dtype) for dw in delta],
                              x_train, y_train, x_eval, y_eval)


class AdapterModel:
    """Stack of frozen layers, each carrying a LoRA adapter."""

    def __init__(self, layers: list[LoraAdapter], activation: str | None = None, loss: str = "mse"):
        self.layers = layers
        self.activation = activation
        self.loss_kind = loss

    @property
    def adapters(self) -> dict[str, LoraAdapter]:
        return {f"layer{i}": ad for i, ad in enumerate(self.layers)}

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, ad in self.adapters.items():
            for role, t in ad.parameters().items():
                out[f"{name}.{role}"] = t
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, ad in enumerate(self.layers):
            h = ad(h)
            if self.activation == "tanh" and i < len(self.layers) - 1:
                h = T.tanh(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = x
        for i, ad in enumerate(self.layers):
            h = ad.forward_np(h)
            if self.activation == "tanh" and i < len(self.layers) - 1:
                h = np.tanh(h)
        return h

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        out = self.forward(Tensor(x, dtype=x.dtype))
        if self.loss_kind == "cross_entropy":
            return T.cross_entropy(out, y)
        return T.mse(out, Tensor(y, dtype=y.dtype))

    def loss_np(self, x: np.ndarray, y: np.ndarray) -> float:
        out = self.forward_np(x)
        if self.loss_kind == "cross_entropy":
            z = out - out.max(axis=0, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
            return float(-np.mean(logp[y, np.arange(y.size)]))
        diff = out - y
        return float(np.sum(diff * diff) / diff.shape[1])

    def copy(self) -> "AdapterModel":
        return AdapterModel([ad.copy() for ad in self.layers], self.activation, self.loss_kind)


def build_model(task: TeacherStudentTask, r: int, seed: int, mode: str = "beamlora", scale: float | str = "rank",
                init_std: float = 0.02, dtype=None) -> AdapterModel:
    """Adapters on every frozen base layer of ``task``.

    ``scale="rank"`` multiplies the scored branch by ``r`` so that uniform
    scores reproduce the plain-LoRA branch at initialisation; plain LoRA
    keeps scale 1 either way.
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {TRAIN_MODES}")
    use_scores = mode != "lora"
    if scale == "rank":
        scale = float(r) if use_scores else 1.0
    layer_seeds = _seeds(_seeds(seed, 4)[1], len(task.W0))
    layers = []
    for W0, ls in zip(task.W0, layer_seeds):
        d, k = W0.shape
        layers.append(init_adapter(d, k, r, ls, init_std=init_std, W0=W0, scale=float(scale),
                                   use_scores=use_scores, dtype=dtype or W0.dtype.type))
    return AdapterModel(layers, task.activation, task.config.loss)


def evaluate(model: AdapterModel, task: TeacherStudentTask) -> float:
    return model.loss_np(task.x_eval, task.y_eval)


def oracle_model(task: TeacherStudentTask) -> AdapterModel:
    """Model whose frozen weights already include the planted update (B = 0)."""
    layers = [LoraAdapter(w + dw, np.zeros((w.shape[0], 1), dtype=w.dtype), np.zeros((1, w.shape[1]), dtype=w.dtype))
              for w, dw in zip(task.W0, task.delta)]
    return AdapterModel(layers, task.activation, task.config.loss)


@dataclass
class OptimConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 600
    batch_size: int = 64
    lr_schedule: str = "cosine"
    score_lr_mult: float = 10.0

    def lr_at(self, step: int) -> float:
        """Learning rate used for optimizer step ``step`` (1-based)."""
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * (step - 1) / self.steps))
        raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class RunRecord:
    steps: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    events: list[OperationEvent] = field(default_factory=list)
    importance: list[dict] = field(default_factory=list)
    status: str = "ok"
    diagnostic: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def final_eval(self) -> float:
        return self.eval_loss[-1] if self.eval_loss else float("nan")


def log_importance(record: RunRecord, step: int, model: AdapterModel) -> None:
    for name, ad in model.adapters.items():
        for mode in IMPORTANCE_MODES:
            record.importance.append({"step": step, "adapter": name, "mode": mode,
                                      "values": rank_importance(ad, mode).tolist()})


def train(
    model: AdapterModel,
    task: TeacherStudentTask,
    optim: OptimConfig,
    schedule: BeamSchedule | None,
    seed: int,
    mode: str = "beamlora",
    log_importance_every: int = 0,
    eval_every: int = 1,
    freeze_scores: bool = False,
    state: AdamState | None = None,
) -> RunRecord:
    """Run ``optim.steps`` Adam steps on minibatches of the training split.

    ``schedule`` enables the prune/expand controller (ignored for ``lora`` and
    ``scored_lora``). Returns the record; ``status == "diverged"`` marks a run
    aborted on a non-finite loss. The optimizer state is left on
    ``record.meta["state"]``.
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {TRAIN_MODES}")
    if freeze_scores:
        for ad in model.layers:
            ad.s_logits.requires_grad = False
    batch_rng = np.random.default_rng(_seeds(seed, 4)[2])
    controller = None
    if schedule is not None and mode not in ("lora", "scored_lora"):
        controller = BeamController(schedule, mode=mode, seed=_seeds(seed, 4)[3])
    state = state or AdamState(optim.lr, optim.beta1, optim.beta2, optim.eps, optim.weight_decay)
    params = model.parameters()
    lr_mult = {k: optim.score_lr_mult for k in params if k.endswith(".s_logits")} if optim.score_lr_mult != 1.0 else None
    record = RunRecord()
    record.meta["state"] = state
    n = task.x_train.shape[1]
    bs = min(optim.batch_size, n)
    order = batch_rng.permutation(n)
    cursor = 0
    if log_importance_every:
        log_importance(record, 0, model)
    for step in range(1, optim.steps + 1):
        if cursor + bs > n:
            order = batch_rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        T.zero_grad(params.values())
        loss = model.loss(task.x_train[:, idx], task.y_train[..., idx])
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            record.status = "diverged"
            record.diagnostic = f"non-finite training loss at step {step}"
            logger.error("run diverged: %s", record.diagnostic)
            break
        loss.backward()
        state.lr = optim.lr_at(step)
        adam_step(params, state, lr_mult=lr_mult)
        p = float("nan")
        if controller is not None:
            record.events.extend(controller.maybe_operate(step, model.adapters, state))
            p = controller.threshold(step)
        record.steps.append(step)
        record.train_loss.append(loss_val)
        record.lr.append(state.lr)
        record.threshold.append(p)
        if step % eval_every == 0 or step == optim.steps:
            record.eval_loss.append(evaluate(model, task))
        else:
            record.eval_loss.append(float("nan"))
        if log_importance_every and step % log_importance_every == 0:
            log_importance(record, step, model)
    return record
