"""AdamW, cosine schedule, checkpoints and the two-phase training loop."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import threading
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import serialize
from . import tensor as T
from .encoder import ConfigError, SpatialEncoder, detection_loss, hungarian_match, matching_cost
from .model import Example, PreparedScene, SceneQAModel
from .nn import Module
from .tensor import NumericalError, ShapeError, Tensor

log = logging.getLogger(__name__)


class CheckpointError(KeyError):
    """Checkpoint tensors do not match the model."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, last_checkpoint: str | None):
        super().__init__(f"{message} (step {step}; last good checkpoint: {last_checkpoint or 'none'})")
        self.step = step
        self.last_checkpoint = last_checkpoint


# ---------------------------------------------------------------- optimizer
@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float, decay: Mapping[str, bool] | None = None) -> None:
    """One AdamW update in place.

    Weight decay is decoupled: ``w -= lr * wd * w`` alongside the Adam step,
    never folded into the moments.  ``decay`` switches decay off per name.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adamw_step: gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ShapeError(f"adamw_step: moment buffer for {name!r} has shape {m.shape}, parameter {p.data.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        wd = state.weight_decay if (decay is None or decay.get(name, True)) else 0.0
        p.data = p.data - lr * wd * p.data - lr * update


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at total_steps; clamps past the end."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step == 0 and total_steps > 0:
        return lr_max
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        k = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * k
    return total


# --------------------------------------------------------------------- plan
@dataclass(frozen=True)
class TrainPlan:
    phase: str = "pretrain"
    epochs: int = 20
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    seed: int = 0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    precision: str = "float32"
    compressor_trainable: bool = True
    query_fusion: bool = True
    lm_frozen: bool = False
    encoder_frozen: bool = False
    tasks: tuple[str, ...] | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min} and {self.lr_max}")

    @classmethod
    def published(cls, phase: str, **overrides) -> TrainPlan:
        """Published schedule: 20 / 100 epochs, batch 16, 1e-4 down to 1e-5 / 1e-6."""
        base = {"pretrain": dict(epochs=20, lr_max=1e-4, lr_min=1e-5),
                "finetune": dict(epochs=100, lr_max=1e-4, lr_min=1e-6, tasks=("qa",))}[phase]
        return cls(phase=phase, **{"batch_size": 16, **base, **overrides})

    @classmethod
    def desk(cls, phase: str, **overrides) -> TrainPlan:
        """CPU-sized defaults: batch 8, higher learning rates for a from-scratch model."""
        base = {"pretrain": dict(epochs=20, lr_max=3e-3, lr_min=3e-4),
                "finetune": dict(epochs=100, lr_max=1e-3, lr_min=1e-5, tasks=("qa",))}[phase]
        return cls(phase=phase, **{"batch_size": 8, **base, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def frozen(name: str, plan: TrainPlan) -> bool:
    if plan.encoder_frozen and name.startswith("encoder."):
        return True
    if plan.lm_frozen and name.startswith("lm."):
        return True
    if not plan.compressor_trainable and name.startswith("compressor."):
        # the fusion and output projections stay trainable: they are the adapters
        return not name.startswith(("compressor.fusion.", "compressor.out_proj."))
    return False


def trainable_parameters(model: Module, plan: TrainPlan) -> dict[str, Tensor]:
    return {n: p for n, p in model.named_parameters() if not frozen(n, plan)}


def decay_mask(params: Mapping[str, Tensor]) -> dict[str, bool]:
    """Decay matrices only; biases, gains and 1-d tables are left alone."""
    return {n: p.data.ndim >= 2 for n, p in params.items()}


# --------------------------------------------------------------- checkpoint
def save_checkpoint(path: str | Path, model: Module, state: OptimizerState | None = None,
                    plan_hash: str | None = None, meta: Mapping | None = None) -> None:
    tensors = dict(model.state_dict())
    info = dict(meta or {})
    info["plan_hash"] = plan_hash
    if state is not None:
        for name, m in state.m.items():
            tensors[f"optim.m.{name}"] = m
            tensors[f"optim.v.{name}"] = state.v[name]
        info["optimizer"] = {"step": state.step, "beta1": state.beta1, "beta2": state.beta2,
                             "eps": state.eps, "weight_decay": state.weight_decay}
    serialize.save(path, tensors, info)


def load_checkpoint(path: str | Path, model: Module, state: OptimizerState | None = None,
                    plan_hash: str | None = None) -> dict:
    """Restore parameters (and optimizer moments) in place; returns the metadata."""
    tensors, info = serialize.load(path)
    own = dict(model.named_parameters())
    stored = {n for n in tensors if not n.startswith("optim.")}
    missing = sorted(set(own) - stored)
    unexpected = sorted(stored - set(own))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint {path} does not match the model: "
                              f"missing tensors {missing}; unexpected tensors {unexpected}")
    for name, p in own.items():
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"checkpoint {path}: {name} has shape {tensors[name].shape}, model expects {p.data.shape}")
        p.data = tensors[name].copy()
    if plan_hash is not None and info.get("plan_hash") not in (None, plan_hash):
        warnings.warn(f"checkpoint {path} was written under plan {info.get('plan_hash')}, resuming with {plan_hash}",
                      stacklevel=2)
    if state is not None and "optimizer" in info:
        opt = info["optimizer"]
        state.step = int(opt["step"])
        state.beta1, state.beta2, state.eps, state.weight_decay = opt["beta1"], opt["beta2"], opt["eps"], opt["weight_decay"]
        state.m = {n[len("optim.m."):]: a.copy() for n, a in tensors.items() if n.startswith("optim.m.")}
        state.v = {n[len("optim.v."):]: a.copy() for n, a in tensors.items() if n.startswith("optim.v.")}
    return info


# --------------------------------------------------------------------- loop
def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Yield ``items`` produced on a worker thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=max(depth, 1))
    done = object()
    failure: list[BaseException] = []

    def work():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # handed to the consumer
            failure.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    if failure:
        raise failure[0]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class TrainResult:
    losses: list[float]
    steps: int
    last_checkpoint: str | None
    plan_hash: str


def _gradients(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in params.items()}


def train(model: SceneQAModel, plan: TrainPlan, examples: Sequence[Example], log_path: str | Path | None = None,
          checkpoint_dir: str | Path | None = None, resume: str | Path | None = None,
          on_step: Callable[[int, float], None] | None = None, meta: Mapping | None = None) -> TrainResult:
    """Optimise ``model`` on ``examples`` under ``plan``; parameters are updated in place."""
    if plan.tasks is not None:
        examples = [e for e in examples if e.task in plan.tasks]
    if not examples:
        raise ValueError("train: no examples to train on")
    if plan.query_fusion != model.config.compressor.query_fusion:
        raise ConfigError(f"plan.query_fusion={plan.query_fusion} but the model was built with "
                          f"query_fusion={model.config.compressor.query_fusion}")
    dtype = np.dtype(T._DTYPES[plan.precision])
    model.astype(dtype)
    params = trainable_parameters(model, plan)
    decay = decay_mask(params)
    state = OptimizerState(beta1=plan.beta1, beta2=plan.beta2, eps=plan.eps, weight_decay=plan.weight_decay)
    plan_hash = plan.hash()
    last_ckpt = None
    if resume is not None:
        load_checkpoint(resume, model, state, plan_hash)
        model.astype(dtype)
        last_ckpt = str(resume)

    n = len(examples)
    per_epoch = math.ceil(n / plan.batch_size)
    total = plan.epochs * per_epoch
    if plan.max_steps is not None:
        total = min(total, plan.max_steps)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    losses: list[float] = []
    step = state.step
    try:
        with T.precision(plan.precision):
            while step < total:
                epoch, offset = divmod(step, per_epoch)
                order = epoch_order(n, plan.seed, epoch)
                batches = [[examples[i] for i in order[b * plan.batch_size:(b + 1) * plan.batch_size]]
                           for b in range(offset, per_epoch)]
                for batch in prefetch(batches):
                    if step >= total:
                        break
                    t0 = time.perf_counter()
                    lr = cosine_lr(step, total, plan.lr_max, plan.lr_min)
                    model.zero_grad()
                    try:
                        loss = model.loss(batch)
                        value = float(loss.data)
                        if not math.isfinite(value):
                            raise NumericalError(f"loss evaluated to {value}")
                        loss.backward()
                    except NumericalError as exc:
                        raise TrainingAborted(f"non-finite value: {exc}", step, last_ckpt) from exc
                    grads = _gradients(params)
                    if plan.grad_clip > 0:
                        clip_grad_norm(grads, plan.grad_clip)
                    adamw_step(params, grads, state, lr, decay)
                    step = state.step
                    losses.append(value)
                    if log_file is not None:
                        rec = {"step": step, "phase": plan.phase, "lr": lr, "loss": value,
                               "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                        log_file.write(json.dumps(rec) + "\n")
                    if on_step is not None:
                        on_step(step, value)
                    if ckpt_dir is not None and (step % per_epoch == 0 or step == total):
                        path = ckpt_dir / f"{plan.phase}_step{step:06d}.ntc"
                        save_checkpoint(path, model, state, plan_hash,
                                        {**(meta or {}), "phase": plan.phase, "epoch": step // per_epoch,
                                         "model_config": model.config.to_dict()})
                        last_ckpt = str(path)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(losses, step, last_ckpt, plan_hash)


# ------------------------------------------------------- detection pre-train
@dataclass
class DetectionReport:
    frac_center_inside: float
    mean_center_l1: float
    mean_pobj_matched: float
    mean_pobj_unmatched: float

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_detector(encoder: SpatialEncoder, scenes: Sequence[PreparedScene], steps: int, lr_max: float = 3e-3,
                      lr_min: float = 1e-4, batch_size: int = 8, seed: int = 0, weight_decay: float = 0.0,
                      grad_clip: float = 1.0, precision: str = "float32",
                      log_path: str | Path | None = None) -> list[float]:
    """Set-prediction training of the encoder on ground-truth boxes."""
    if not scenes:
        raise ValueError("pretrain_detector: no scenes")
    encoder.astype(np.dtype(T._DTYPES[precision]))
    params = dict(encoder.named_parameters())
    decay = decay_mask(params)
    state = OptimizerState(weight_decay=weight_decay)
    per_epoch = math.ceil(len(scenes) / batch_size)
    losses = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        with T.precision(precision):
            for step in range(steps):
                epoch, b = divmod(step, per_epoch)
                order = epoch_order(len(scenes), seed, epoch)
                batch = [scenes[i] for i in order[b * batch_size:(b + 1) * batch_size]]
                encoder.zero_grad()
                preds = encoder([s.geometry for s in batch])
                loss, matches = detection_loss(preds, [s.boxes for s in batch])
                loss.backward()
                grads = _gradients(params)
                clip_grad_norm(grads, grad_clip)
                adamw_step(params, grads, state, cosine_lr(step, steps, lr_max, lr_min), decay)
                losses.append(float(loss.data))
                if log_file is not None:
                    err = [np.abs(preds.centers.data[i, m] - np.stack([bx.center for bx in batch[i].boxes])).sum(-1).mean()
                           for i, m in enumerate(matches) if len(m)]
                    log_file.write(json.dumps({"epoch": epoch, "step": step + 1, "loss": losses[-1],
                                               "matched_center_error": float(np.mean(err)) if err else None}) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    return losses


def evaluate_detection(encoder: SpatialEncoder, scenes: Sequence[PreparedScene], batch_size: int = 16) -> DetectionReport:
    inside = l1 = 0.0
    n_truth = 0
    matched_p, unmatched_p = [], []
    with T.no_grad():
        for start in range(0, len(scenes), batch_size):
            batch = scenes[start:start + batch_size]
            preds = encoder([s.geometry for s in batch])
            for i, s in enumerate(batch):
                centers, p_obj = preds.centers.data[i], preds.p_obj.data[i]
                used = np.zeros(len(p_obj), dtype=bool)
                if s.boxes:
                    tc = np.stack([b.center for b in s.boxes])
                    match = hungarian_match(matching_cost(centers, p_obj, tc))
                    used[match] = True
                    for j, box in enumerate(s.boxes):
                        inside += float(box.contains(centers[match[j]])[0])
                        l1 += float(np.abs(centers[match[j]] - box.center).sum())
                    n_truth += len(s.boxes)
                matched_p += list(p_obj[used])
                unmatched_p += list(p_obj[~used])
    return DetectionReport(inside / max(n_truth, 1), l1 / max(n_truth, 1),
                           float(np.mean(matched_p)) if matched_p else float("nan"),
                           float(np.mean(unmatched_p)) if unmatched_p else float("nan"))
