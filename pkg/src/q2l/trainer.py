"""Adam with decoupled weight decay, parameter EMA, LR schedule and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .metrics import per_category_ap, threshold_metrics
from .model import save_checkpoint
from .objective import LossConfig, asymmetric_loss

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "lr", "train_loss", "val_mAP", "val_OF1", "val_CF1"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optim_step(params: dict[str, nc.Tensor], state: OptimState, lr: float | None = None) -> OptimState:
    """One Adam update with weight decay applied directly to the parameters.

    Parameters without a gradient are skipped.  Arrays are replaced, never
    mutated, so earlier snapshots of ``p.data`` stay valid.
    """
    lr = state.lr if lr is None else lr
    if state.t >= 2**62:
        raise OverflowError("optimizer step counter overflow")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ValueError(f"{name}: moment buffer shape {m.shape} != parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - lr * update - lr * state.weight_decay * p.data).astype(p.dtype, copy=False)
    return state


@dataclass
class EmaState:
    decay: float
    shadow: dict[str, np.ndarray]

    @classmethod
    def from_params(cls, params: dict[str, nc.Tensor], decay: float) -> "EmaState":
        return cls(decay, {k: p.data.copy() for k, p in params.items()})


def ema_update(ema: EmaState, params: dict[str, nc.Tensor]) -> EmaState:
    mu = ema.decay
    for k, p in params.items():
        s = ema.shadow.get(k)
        if s is None or s.shape != p.shape:
            raise ValueError(f"EMA shadow for {k} does not match parameter shape {p.shape}")
        ema.shadow[k] = (mu * s + (1.0 - mu) * p.data).astype(s.dtype, copy=False)
    return ema


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine to zero."""
    warm = max(1, int(round(warmup_frac * total_steps))) if warmup_frac > 0 else 0
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.9999
    adam_eps: float = 1e-8
    ema_decay: float = 0.9997
    warmup_frac: float = 0.05
    seed: int = 0
    gamma_pos: float = 0.0
    gamma_neg: float = 1.0
    prob_clamp_eps: float = 1e-7
    threshold: float = 0.5
    augment_flip: bool = True
    augment_shift: int = 4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.gamma_pos, self.gamma_neg, self.prob_clamp_eps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    history: list[dict]
    best_map: float
    best_epoch: int
    best_state: dict[str, np.ndarray]
    best_ema_map: float
    best_ema_state: dict[str, np.ndarray]
    ema: EmaState
    seconds: float


def _as_float_images(images) -> np.ndarray:
    x = np.asarray(images)
    if x.dtype == np.uint8:
        return x.astype(nc.get_default_dtype()) / np.asarray(255.0, dtype=nc.get_default_dtype())
    return x.astype(nc.get_default_dtype(), copy=False)


def augment_batch(x: np.ndarray, rng: np.random.Generator, flip: bool, shift: int) -> np.ndarray:
    """Random horizontal flips and reflect-padded translations of up to ``shift`` pixels."""
    out = x.copy()
    n, h, w, _ = x.shape
    if flip:
        rows = rng.random(n) < 0.5
        out[rows] = out[rows, :, ::-1]
    if shift > 0:
        padded = np.pad(out, ((0, 0), (shift, shift), (shift, shift), (0, 0)), mode="reflect")
        dy = rng.integers(0, 2 * shift + 1, size=n)
        dx = rng.integers(0, 2 * shift + 1, size=n)
        for i in range(n):
            out[i] = padded[i, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def evaluate(model, images, targets, threshold: float = 0.5, batch_size: int = 128) -> dict[str, float]:
    probs = model.predict_proba(_as_float_images(images), batch_size=batch_size)
    ap = per_category_ap(probs, targets)
    tm = threshold_metrics(probs, targets, threshold=threshold)
    defined = ap[~np.isnan(ap)]
    return {"mAP": float(defined.mean()) if defined.size else float("nan"), "OF1": tm.OF1, "CF1": tm.CF1}


def _with_state(model, state: dict[str, np.ndarray]):
    saved = model.state_dict()
    model.load_state_dict(state)
    return saved


def train(model, train_images, train_targets, config: TrainConfig | None = None,
          eval_images=None, eval_targets=None, out_dir=None) -> TrainResult:
    """Mini-batch training with the asymmetric loss.

    Evaluates raw and EMA weights after each epoch when eval data is given
    and keeps the best of each; with ``out_dir`` writes ``train_log.csv``,
    ``best.ckpt``, ``best_ema.ckpt`` and ``last.ckpt``.
    """
    cfg = config or TrainConfig()
    x = _as_float_images(train_images)
    y = np.asarray(train_targets)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} target rows")
    loss_cfg = cfg.loss_config()
    params = model.named_parameters()
    opt = OptimState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    ema = EmaState.from_params(params, cfg.ema_decay)
    has_eval = eval_images is not None and eval_targets is not None
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_HEADER)
    history = []
    best_map, best_epoch, best_state = -1.0, -1, model.state_dict()
    best_ema_map, best_ema_state = -1.0, {k: v.copy() for k, v in ema.shadow.items()}
    step = 0
    start = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x))
            losses = []
            lr = cfg.lr
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                lr = lr_at(step, total, cfg.lr, cfg.warmup_frac)
                model.zero_grad()
                xb = x[idx]
                if cfg.augment_flip or cfg.augment_shift:
                    aug_rng = np.random.default_rng([cfg.seed, epoch, b, 0xA5])
                    xb = augment_batch(xb, aug_rng, cfg.augment_flip, cfg.augment_shift)
                fwd = model.forward(xb)
                loss = asymmetric_loss(fwd.prob_tensor, y[idx], loss_cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} batch {b} (step {step}, lr {lr:.3g})"
                    )
                nc.backward(loss)
                optim_step(params, opt, lr=lr)
                ema_update(ema, params)
                losses.append(value)
                step += 1
            row = {"epoch": epoch, "step": step, "lr": lr, "train_loss": float(np.mean(losses)),
                   "val_mAP": float("nan"), "val_OF1": float("nan"), "val_CF1": float("nan")}
            if has_eval:
                m = evaluate(model, eval_images, eval_targets, cfg.threshold)
                row.update(val_mAP=m["mAP"], val_OF1=m["OF1"], val_CF1=m["CF1"])
                if m["mAP"] > best_map:
                    best_map, best_epoch, best_state = m["mAP"], epoch, model.state_dict()
                    if out is not None:
                        save_checkpoint(out / "best.ckpt", model, extra={"epoch": epoch, "val_mAP": m["mAP"]})
                raw = _with_state(model, ema.shadow)
                try:
                    em = evaluate(model, eval_images, eval_targets, cfg.threshold)
                    if em["mAP"] > best_ema_map:
                        best_ema_map = em["mAP"]
                        best_ema_state = {k: v.copy() for k, v in ema.shadow.items()}
                        if out is not None:
                            save_checkpoint(out / "best_ema.ckpt", model,
                                            extra={"epoch": epoch, "val_mAP": em["mAP"], "ema": True})
                finally:
                    model.load_state_dict(raw)
            history.append(row)
            log.info("epoch %d loss %.4f val_mAP %.4f", epoch, row["train_loss"], row["val_mAP"])
            if writer is not None:
                writer.writerow([row[k] if k in ("epoch", "step") else f"{row[k]:.6g}" for k in LOG_HEADER])
                log_fh.flush()
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, extra={"epoch": cfg.epochs - 1})
            if not has_eval:
                save_checkpoint(out / "best.ckpt", model, extra={"epoch": cfg.epochs - 1})
                raw = _with_state(model, ema.shadow)
                save_checkpoint(out / "best_ema.ckpt", model, extra={"epoch": cfg.epochs - 1, "ema": True})
                model.load_state_dict(raw)
    finally:
        if writer is not None:
            log_fh.close()
    if not has_eval:
        best_state, best_epoch = model.state_dict(), cfg.epochs - 1
        best_ema_state = {k: v.copy() for k, v in ema.shadow.items()}
    return TrainResult(history, best_map, best_epoch, best_state, best_ema_map, best_ema_state, ema,
                       time.perf_counter() - start)
