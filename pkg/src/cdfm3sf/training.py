"""Losses, Adam with staircase exponential decay, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import MaskPyramid, Model, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

NODATA = 255
PROB_CLAMP = 1e-7
LOSS_WEIGHTS = (1.0, 0.1, 0.01)


@dataclass
class TrainConfig:
    batch_size: int = 24
    epochs: int = 40
    beta1: float = 0.5
    beta2: float = 0.9
    lr: float = 0.001
    decay_rate: float = 0.995
    decay_step: int = 5
    decay_unit: str = "epoch"
    adam_eps: float = 1e-8
    loss_weights: tuple = LOSS_WEIGHTS
    seed: int = 0
    max_steps: int | None = None

    def validate(self) -> None:
        for name in ("beta1", "beta2", "decay_rate"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss weights must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1 or self.decay_step < 1:
            raise ValueError("batch_size, epochs and decay_step must be positive")
        if self.decay_unit not in ("epoch", "step"):
            raise ValueError("decay_unit must be 'epoch' or 'step'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


def bce_loss(pred: Tensor, ref, clamp: float = PROB_CLAMP) -> Tensor:
    """Mean binary cross-entropy over valid pixels.

    ``ref`` holds 0 (clear), 1 (cloud) or 255 (no-data, excluded). ``pred``
    is clamped to ``[clamp, 1 - clamp]`` before the logs; clamped entries
    pass no gradient.
    """
    y = np.asarray(ref)
    if y.shape != pred.shape:
        raise ValueError(f"bce_loss: prediction {pred.shape} and reference {y.shape} differ")
    bad = ~np.isin(y, (0, 1, NODATA))
    if bad.any():
        raise ValueError(f"bce_loss: reference holds values other than 0/1/255, e.g. {y[bad].flat[0]}")
    valid = y != NODATA
    count = int(valid.sum())
    p = pred.data
    pc = np.clip(p, clamp, 1.0 - clamp)
    yf = np.where(valid, y, 0).astype(p.dtype)
    if count == 0:
        return T.make_op(np.asarray(0.0, dtype=p.dtype), (pred,), lambda g: (np.zeros_like(p),), "bce")
    terms = yf * np.log(pc) + (1.0 - yf) * np.log1p(-pc)
    loss = -np.where(valid, terms, 0.0).sum() / count
    live = valid & (p >= clamp) & (p <= 1.0 - clamp)

    def bw(g):
        d = -(yf / pc - (1.0 - yf) / (1.0 - pc)) / count
        return (np.where(live, d, 0.0) * g,)

    return T.make_op(np.asarray(loss, dtype=p.dtype), (pred,), bw, "bce")


def _levels(pyr):
    return pyr.levels() if isinstance(pyr, MaskPyramid) else tuple(pyr)


def total_loss(pred: MaskPyramid, ref, weights=LOSS_WEIGHTS, return_parts: bool = False):
    """Weighted sum of the per-level losses (top, middle, bottom)."""
    preds, refs = _levels(pred), _levels(ref)
    if len(refs) != 3:
        raise ValueError("reference pyramid must have three levels")
    parts = []
    for name, p, r in zip(("top", "middle", "bottom"), preds, refs):
        if tuple(np.shape(r)) != p.shape:
            raise ValueError(f"{name} level: prediction {p.shape} vs reference {np.shape(r)}")
        parts.append(bce_loss(p, r))
    total = T.scale(parts[0], weights[0])
    for w, part in zip(weights[1:], parts[1:]):
        total = T.add(total, T.scale(part, w))
    if return_parts:
        return total, parts
    return total


def lr_at(index: int, config: TrainConfig) -> float:
    """Staircase exponential decay: lr * rate ** (index // step)."""
    if index < 0:
        raise ValueError("decay index must be nonnegative")
    return config.lr * config.decay_rate ** (index // config.decay_step)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    def __init__(self, beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState()

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name}")
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1 ** st.step
        bc2 = 1.0 - self.beta2 ** st.step
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in st.m:
                st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            m, v = st.m[name], st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: dict[str, Tensor], optimizer: Adam, lr: float) -> None:
    optimizer.step(params, lr)


class TrainingDiverged(RuntimeError):
    pass


def stack_batch(groups, dtype=None) -> tuple[dict, tuple]:
    dtype = dtype or T.get_default_dtype()
    inputs = {
        "vnir": np.stack([g.vnir for g in groups]).astype(dtype),
        "vre_swir": np.stack([g.vre_swir for g in groups]).astype(dtype),
        "ca_wv_cir": np.stack([g.ca_wv_cir for g in groups]).astype(dtype),
    }
    refs = tuple(np.stack([getattr(g, k) for g in groups])[..., None]
                 for k in ("mask_t", "mask_m", "mask_b"))
    return inputs, refs


def _fmt(v: float) -> str:
    return repr(float(v))


def train(model: Model, dataset, config: TrainConfig | None = None, out_dir=None):
    """Run seeded mini-batch training; return (checkpoint path or None, log records).

    Each record is ``(step, lr, L_total, L_t, L_m, L_b)``. With ``out_dir``
    set, ``loss_log.tsv`` and ``model.ckpt`` are written there; on a
    non-finite loss the last good parameters are checkpointed and
    :class:`TrainingDiverged` is raised.
    """
    config = config or TrainConfig()
    config.validate()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    params = model.named_parameters()
    opt = Adam(config.beta1, config.beta2, config.adam_eps)
    records: list[tuple] = []
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "model.ckpt" if out is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "loss_log.tsv", "w")
        header = {"train_config": config.to_dict(), "model_config": model.config.to_dict(),
                  "seed": config.seed, "decay_unit": config.decay_unit, "n_groups": len(dataset)}
        logf.write("# " + json.dumps(header, sort_keys=True) + "\n")
        logf.write("step\tlr\tL_total\tL_t\tL_m\tL_b\n")
    step = 0
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
            for start in range(0, len(order), config.batch_size):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                lr = lr_at(epoch if config.decay_unit == "epoch" else step, config)
                batch = [dataset[i] for i in order[start:start + config.batch_size]]
                inputs, refs = stack_batch(batch)
                for p in params.values():
                    p.zero_grad()
                pyr = model.forward(inputs, training=True)
                loss, parts = total_loss(pyr, refs, config.loss_weights, return_parts=True)
                values = [float(loss.data)] + [float(p.data) for p in parts]
                if not all(math.isfinite(v) for v in values):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                T.backward(loss)
                try:
                    opt.step(params, lr)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"step {step}: {exc}") from exc
                step += 1
                rec = (step, lr, *values)
                records.append(rec)
                if logf is not None:
                    logf.write("\t".join([str(step)] + [_fmt(v) for v in rec[1:]]) + "\n")
                if step % 10 == 0 or step == 1:
                    log.info("step %d lr %.6g loss %.5f", step, lr, values[0])
            if config.max_steps is not None and step >= config.max_steps:
                break
    except TrainingDiverged:
        if ckpt is not None:
            save_checkpoint(model, ckpt)
        raise
    finally:
        if logf is not None:
            logf.close()
    if ckpt is not None:
        save_checkpoint(model, ckpt)
    return ckpt, records
