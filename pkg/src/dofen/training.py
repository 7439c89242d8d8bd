"""AdamW optimization loop, metrics, and evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, backward
from .config import ConfigError
from .data import CLASSIFICATION, Preprocessor, TableDataset, batches
from .model import DofenModel, forward_loss, predict_dataset


class TrainingError(RuntimeError):
    """Non-finite numbers or an otherwise aborted run."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 256
    epochs: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0      # epochs between validation evaluations; 0 = off
    keep_best: bool = False  # also save the best-validation checkpoint
    adaptive_batch: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must be in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every must be >= 0, got {self.eval_every}")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)  # one entry per epoch
    val_metrics: list[tuple[int, float]] = field(default_factory=list)
    metric_name: str = ""
    final_metric: float | None = None
    wall_clock_sec: float = 0.0
    effective_batch_size: int = 0


def effective_batch_size(requested: int, n_rows: int) -> int:
    """Cap the batch size at the largest power of two not exceeding n/10."""
    if n_rows < 10:
        cap = 1
    else:
        cap = 2 ** ((n_rows // 10).bit_length() - 1)
    return max(1, min(requested, cap))


def adamw_step(
    params: list[tuple[str, Tensor]],
    state: dict[str, dict[str, np.ndarray]],
    t: int,
    config: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Bias-corrected first/second moments; the decay term acts on the raw
    parameter outside the adaptive step (a no-op at the default decay 0).
    """
    if t < 1:
        raise ValueError(f"step counter must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r} at step {t}")
        slot = state.get(name)
        if slot is None:
            slot = state[name] = {
                "m": np.zeros_like(p.data),
                "v": np.zeros_like(p.data),
            }
        slot["m"] = b1 * slot["m"] + (1.0 - b1) * g
        slot["v"] = b2 * slot["v"] + (1.0 - b2) * (g * g)
        m_hat = slot["m"] / (1.0 - b1**t)
        v_hat = slot["v"] / (1.0 - b2**t)
        p.data -= config.learning_rate * (
            m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * p.data
        )


@dataclass
class EvalResult:
    metric_name: str  # "accuracy" | "r2"
    value: float | None
    constant_target: bool = False

    def to_dict(self) -> dict:
        return {
            "metric": self.metric_name,
            "value": self.value,
            "constant_target": self.constant_target,
        }


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy is undefined on an empty dataset")
    return float((predicted == labels).mean())


def r_squared(predicted: np.ndarray, target: np.ndarray) -> float | None:
    """1 - SS_res/SS_tot; None when the target is constant (SS_tot == 0)."""
    if len(target) == 0:
        raise ValueError("r-squared is undefined on an empty dataset")
    ss_tot = float(((target - target.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return None
    ss_res = float(((target - predicted) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def evaluate(model: DofenModel, dataset: TableDataset, preprocessor: Preprocessor) -> EvalResult:
    """Accuracy for classification; R-squared on the original target scale."""
    if dataset.n_rows == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.y is None:
        raise ValueError("cannot evaluate a dataset without a target column")
    out = predict_dataset(model, preprocessor, dataset)
    if model.table.task == CLASSIFICATION:
        return EvalResult("accuracy", accuracy(out.label_codes, dataset.y))
    target = preprocessor.destandardize_target(dataset.y.astype(np.float64))
    value = r_squared(out.values, target)
    if value is None:
        return EvalResult("r2", None, constant_target=True)
    return EvalResult("r2", value)


def train(
    model: DofenModel,
    preprocessor: Preprocessor,
    train_ds: TableDataset,
    val_ds: TableDataset | None,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainReport:
    """Run the optimization loop; deterministic under fixed seeds.

    When ``out_dir`` is given, writes model.dofen (final), best.dofen (only
    with keep_best and periodic validation) and train_log.jsonl (one record
    per epoch).
    """
    from .checkpoint import save_checkpoint  # local import to avoid a cycle

    config.validate()
    started = time.monotonic()
    report = TrainReport(metric_name="accuracy" if train_ds.task == CLASSIFICATION else "r2")
    params = model.parameters()
    state: dict[str, dict[str, np.ndarray]] = {}
    bs = (
        effective_batch_size(config.batch_size, train_ds.n_rows)
        if config.adaptive_batch
        else config.batch_size
    )
    report.effective_batch_size = bs

    log_path = Path(out_dir) / "train_log.jsonl" if out_dir is not None else None
    log_handle = open(log_path, "w", encoding="utf-8") if log_path else None
    best_value = -math.inf
    step = 0
    try:
        for epoch in range(config.epochs):
            if model.config.resample_forests_each_epoch:
                model.redraw_forest_plan(epoch)
            epoch_losses = []
            for batch_no, (xn, xc, y) in enumerate(
                batches(train_ds, bs, seed=config.seed, epoch=epoch)
            ):
                with Tape():
                    _, loss = forward_loss(model, xn, xc, y, training=True)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite training loss at epoch {epoch}, batch {batch_no}"
                    )
                model.zero_grad()
                backward(loss)
                step += 1
                adamw_step(params, state, step, config)
                epoch_losses.append(value)
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
            report.train_losses.append(mean_loss)

            record = {"epoch": epoch, "train_loss": mean_loss}
            if (
                val_ds is not None
                and config.eval_every > 0
                and (epoch + 1) % config.eval_every == 0
            ):
                result = evaluate(model, val_ds, preprocessor)
                if result.value is not None:
                    report.val_metrics.append((epoch, result.value))
                    record["val_" + result.metric_name] = result.value
                    if config.keep_best and out_dir is not None and result.value > best_value:
                        best_value = result.value
                        save_checkpoint(Path(out_dir) / "best.dofen", model, preprocessor)
            if log_handle:
                log_handle.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_handle:
            log_handle.close()

    if val_ds is not None and val_ds.n_rows:
        final = evaluate(model, val_ds, preprocessor)
        report.final_metric = final.value
    report.wall_clock_sec = time.monotonic() - started
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "model.dofen", model, preprocessor)
    return report
