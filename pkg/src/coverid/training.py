"""Optimization: AdamW with decoupled weight decay, linear warmup, early stopping.

The step update is

    m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
    mhat = m / (1 - b1^t)       vhat = v / (1 - b2^t)
    theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta)

with the decay applied outside the adaptive term. The learning rate is an
explicit argument so the caller owns the schedule; `lr_schedule` gives the
linear warmup used by `train`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .featurestore import Manifest, read_feature_file
from .losses import (  # re-exported: the loss API lives with the optimizer users
    LossBreakdown, LossConfig, loss_and_gradients, loss_cos, loss_mse, loss_total,
)

__all__ = [
    "LossBreakdown", "LossConfig", "loss_and_gradients", "loss_cos", "loss_mse",
    "loss_total", "OptimizerConfig", "OptimizerState", "lr_schedule", "adamw_step",
    "EarlyStopState", "TrainConfig", "TrainResult", "train",
]


@dataclass
class OptimizerConfig:
    lr_peak: float = 1e-4
    warmup_steps: int = 10_000
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.lr_peak <= 0.0 or self.epsilon <= 0.0:
            raise ValueError("lr_peak and epsilon must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: enc.EncoderParams) -> "OptimizerState":
        return cls(
            step=0,
            m={k: np.zeros_like(t) for k, t in params.tensors().items()},
            v={k: np.zeros_like(t) for k, t in params.tensors().items()},
        )


def lr_schedule(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to lr_peak, then constant; the loop queries it at step+1."""
    if step < 0:
        raise ValueError(f"schedule step must be >= 0, got {step}")
    return cfg.lr_peak * min(1.0, step / cfg.warmup_steps)


def adamw_step(params: enc.EncoderParams, grads: dict[str, np.ndarray],
               state: OptimizerState, cfg: OptimizerConfig, lr: float) -> None:
    """One in-place update of every tensor; increments state.step first."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, theta in params.tensors().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        theta -= lr * (update + cfg.weight_decay * theta)


@dataclass
class EarlyStopState:
    patience: int
    best: float = -np.inf
    best_step: int = 0
    evals_since_best: int = 0
    should_stop: bool = False

    def update(self, metric: float, step: int) -> bool:
        """Record one validation result; returns True when training should stop.

        Strict improvement resets the counter; ties count against patience.
        """
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if metric > self.best:
            self.best = metric
            self.best_step = step
            self.evals_since_best = 0
        else:
            self.evals_since_best += 1
            if self.evals_since_best >= self.patience:
                self.should_stop = True
        return self.should_stop


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 128
    alpha: float = 0.5
    seed: int = 17
    eval_interval: int = 500
    patience: int = 5
    max_steps: int | None = None
    target_val_cosine: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if self.eval_interval < 1 or self.patience < 1:
            raise ValueError("eval_interval and patience must be >= 1")


@dataclass
class TrainResult:
    best_val_cosine: float
    best_step: int
    steps_run: int
    stopped_early: bool
    checkpoint_path: Path


def _load_pairs(manifest: Manifest, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """Frame/teacher pairs for a split, matched per segment index, manifest order."""
    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    for track in manifest.split(split):
        if track.teacher_path is None:
            raise ValueError(f"track {track.track_id!r} has no teacher embeddings to train on")
        feats = read_feature_file(manifest.resolve(track.feature_path))
        teach = read_feature_file(manifest.resolve(track.teacher_path))
        by_index = {t.segment_index: t for t in teach}
        for f in feats:
            if f.segment_index not in by_index:
                raise ValueError(
                    f"track {track.track_id!r}: segment {f.segment_index} has no teacher embedding")
            pairs.append((f.data.astype(np.float64),
                          by_index[f.segment_index].data.astype(np.float64)))
    return pairs


def _mean_val_cosine(pairs: list[tuple[np.ndarray, np.ndarray]],
                     params: enc.EncoderParams, cfg: enc.EncoderConfig) -> float:
    cosines = []
    for H, t in pairs:
        a = enc.encode_segment(H, params, cfg)
        na, nt = np.linalg.norm(a), np.linalg.norm(t)
        cosines.append(float(a @ t / (na * nt)) if na > 0 and nt > 0 else 0.0)
    return float(np.mean(cosines))


def train(manifest: Manifest, params: enc.EncoderParams, enc_cfg: enc.EncoderConfig,
          opt_cfg: OptimizerConfig, train_cfg: TrainConfig, out_dir: str | Path,
          log_path: str | Path | None = None) -> TrainResult:
    """Distill the encoder onto the teacher embeddings in the manifest.

    Deterministic for a fixed seed: per-epoch shuffles come from one seeded
    generator and accumulation order is fixed. Batches with fewer than two
    pairs are skipped (the geometry term needs at least one off-diagonal
    entry). The best checkpoint by validation cosine is kept on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "encoder_best.ckpt"
    log_file = open(log_path, "w") if log_path is not None else None

    train_pairs = _load_pairs(manifest, "train")
    val_pairs = _load_pairs(manifest, "val")
    if not train_pairs:
        raise ValueError("training split produced no frame/teacher pairs")

    loss_cfg = LossConfig(alpha=train_cfg.alpha)
    state = OptimizerState.for_params(params)
    stopper = EarlyStopState(patience=train_cfg.patience)
    rng = np.random.default_rng(train_cfg.seed)
    best_saved = False

    def evaluate_and_log(step: int) -> bool:
        val_cos = _mean_val_cosine(val_pairs, params, enc_cfg) if val_pairs else 0.0
        nonlocal best_saved
        improved = val_cos > stopper.best
        stop = stopper.update(val_cos, step)
        if improved or not best_saved:
            enc.save_checkpoint(ckpt_path, params, enc_cfg)
            best_saved = True
        if log_file:
            print(json.dumps({"step": step, "val_cosine": val_cos}), file=log_file, flush=True)
        if train_cfg.target_val_cosine is not None and val_cos >= train_cfg.target_val_cosine:
            return True
        return stop

    try:
        done = False
        for _epoch in range(train_cfg.epochs):
            if done:
                break
            order = rng.permutation(len(train_pairs))
            for lo in range(0, len(order), train_cfg.batch_size):
                idx = order[lo:lo + train_cfg.batch_size]
                if idx.size < 2:
                    continue
                batch = [train_pairs[i][0] for i in idx]
                teachers = np.stack([train_pairs[i][1] for i in idx])
                breakdown, grads = enc.backward(batch, teachers, params, enc_cfg, loss_cfg)
                lr = lr_schedule(state.step + 1, opt_cfg)
                adamw_step(params, grads, state, opt_cfg, lr)
                if log_file:
                    print(json.dumps({
                        "step": state.step, "loss_total": breakdown.total,
                        "loss_cos": breakdown.cos, "loss_mse": breakdown.mse, "lr": lr,
                    }), file=log_file, flush=True)
                if state.step % train_cfg.eval_interval == 0:
                    if evaluate_and_log(state.step):
                        done = True
                        break
                if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
                    done = True
                    break
        if not done or not best_saved:
            evaluate_and_log(state.step)
    finally:
        if log_file:
            log_file.close()

    return TrainResult(
        best_val_cosine=stopper.best, best_step=stopper.best_step,
        steps_run=state.step, stopped_early=stopper.should_stop,
        checkpoint_path=ckpt_path,
    )
