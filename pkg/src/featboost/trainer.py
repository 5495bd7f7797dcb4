"""Training loop: decoupled-weight-decay Adam with linear warmup and
per-epoch cosine decay, batched over labeled image pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .booster import boost, boost_matrix
from .errors import ConfigError, NumericalAbort
from .fastap import mean_average_precision, pair_loss
from .kvconfig import parse_kv_file, reject_unknown, take

METRICS_COLUMNS = ("epoch", "step", "lr", "loss", "ap_boosted", "ap_raw")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 25
    batch_pairs: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 500
    lam: float = 10.0
    weight_decay: float = 1e-2
    seed: int = 0
    bins: int = 10
    head: str = "real"
    layers: int = 2
    train_pairs: int = 48
    heldout_pairs: int = 6
    select_best: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        for name in ("steps_per_epoch", "batch_pairs", "warmup_steps", "bins",
                     "layers", "train_pairs", "heldout_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.base_lr <= 0.0:
            raise ConfigError("base_lr must be positive")
        if self.lam < 0.0:
            raise ConfigError("lam must be nonnegative")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.head not in ("real", "binary"):
            raise ConfigError(f"unknown head kind: {self.head!r}")

    @classmethod
    def from_file(cls, path):
        fields = parse_kv_file(path)
        kwargs = {}
        def parse_bool(raw):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")

        for name, conv in (("epochs", int), ("steps_per_epoch", int),
                           ("batch_pairs", int), ("base_lr", float),
                           ("warmup_steps", int), ("lambda", float),
                           ("weight_decay", float), ("seed", int), ("bins", int),
                           ("head", str), ("layers", int), ("train_pairs", int),
                           ("heldout_pairs", int), ("select_best", parse_bool)):
            value = take(fields, name, conv)
            if value is not None:
                kwargs["lam" if name == "lambda" else name] = value
        reject_unknown(fields, "training")
        return cls(**kwargs)


def lr_schedule(step, epoch, config):
    """Linear warmup to base_lr, then cosine over epochs, constant per epoch."""
    if step < 0:
        raise ConfigError("step must be nonnegative")
    if step < config.warmup_steps:
        return config.base_lr * (step + 1) / config.warmup_steps
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(config.epochs, 1)))


class AdamW:
    """Bias-corrected Adam moments with decoupled weight decay."""

    def __init__(self, config):
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.eps
        self.weight_decay = config.weight_decay
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, params, lr):
        """Apply one update from the gradients stored on the parameters."""
        for name, p in params.tensors.items():
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise NumericalAbort(f"non-finite gradient in {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.tensors.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * update
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data


@dataclass
class TrainResult:
    params: object
    metrics: list
    aborted: bool = False
    abort_reason: str = ""


def _zero_grads(params):
    for p in params.tensors.values():
        p.grad = None


def _pair_loss_tensor(pair, params, lam, bins):
    xa = boost_matrix(dk.tensor(pair.a.descriptor_matrix()),
                      dk.tensor(pair.a.geometry_matrix()), params)
    xb = boost_matrix(dk.tensor(pair.b.descriptor_matrix()),
                      dk.tensor(pair.b.geometry_matrix()), params)
    return pair_loss(xa, xb, pair.a, pair.b, pair.labels, lam,
                     boosted_kind=params.head, bins=bins)


def evaluate_heldout(params, pairs, bins=10, lam=0.0):
    """Mean boosted AP, mean raw AP, and mean loss over a fixed pair list."""
    ap_boost_sum = ap_raw_sum = loss_sum = 0.0
    n_boost = n_raw = 0
    with dk.pause_tape():
        for pair in pairs:
            loss_sum += _pair_loss_tensor(pair, params, lam, bins).item()
            ba, bb = boost(pair.a, params), boost(pair.b, params)
            for anchor, target, labels in ((ba, bb, pair.labels),
                                           (bb, ba, pair.labels.transposed())):
                ap, cnt = mean_average_precision(anchor, target, labels, bins)
                ap_boost_sum += ap * cnt
                n_boost += cnt
            for anchor, target, labels in ((pair.a, pair.b, pair.labels),
                                           (pair.b, pair.a, pair.labels.transposed())):
                ap, cnt = mean_average_precision(anchor, target, labels, bins)
                ap_raw_sum += ap * cnt
                n_raw += cnt
    ap_boosted = ap_boost_sum / n_boost if n_boost else 0.0
    ap_raw = ap_raw_sum / n_raw if n_raw else 0.0
    return ap_boosted, ap_raw, loss_sum / len(pairs) if pairs else 0.0


def train(config, pairs, params, heldout):
    """Optimize `params` on a stream of labeled pairs.

    `pairs` is an iterator of LabeledPair; `heldout` a fixed list used for
    the per-epoch evaluation. Returns a TrainResult whose metrics rows
    follow METRICS_COLUMNS; the first row is the evaluation of the initial
    parameters. With `select_best` (the default) the returned parameters
    are the epoch snapshot with the highest held-out boosted AP (the
    metrics log still shows the full trajectory); otherwise the final
    parameters are returned. On a non-finite loss or gradient the loop
    aborts and the last successfully updated parameters are returned.
    """
    optimizer = AdamW(config)
    metrics = []

    ap_b, ap_r, loss0 = evaluate_heldout(params, heldout, config.bins, config.lam)
    metrics.append({"epoch": 0, "step": 0, "lr": lr_schedule(0, 0, config),
                    "loss": loss0, "ap_boosted": ap_b, "ap_raw": ap_r})
    best_ap, best_params = ap_b, params.copy() if config.select_best else None

    global_step = 0
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for _ in range(config.steps_per_epoch):
            lr = lr_schedule(global_step, epoch, config)
            batch = [next(pairs) for _ in range(config.batch_pairs)]
            _zero_grads(params)
            with dk.GradTape() as tape:
                total = None
                for pair in batch:
                    term = _pair_loss_tensor(pair, params, config.lam, config.bins)
                    total = term if total is None else dk.add(total, term)
                loss = dk.scale(total, 1.0 / len(batch))
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                return TrainResult(params, metrics, aborted=True,
                                   abort_reason=f"non-finite loss at step {global_step}")
            tape.gradient(loss)
            try:
                optimizer.step(params, lr)
            except NumericalAbort as exc:
                return TrainResult(params, metrics, aborted=True, abort_reason=str(exc))
            epoch_loss += loss_value
            global_step += 1
        ap_b, ap_r, _ = evaluate_heldout(params, heldout, config.bins, config.lam)
        metrics.append({"epoch": epoch + 1, "step": global_step,
                        "lr": lr_schedule(global_step - 1, epoch, config),
                        "loss": epoch_loss / config.steps_per_epoch,
                        "ap_boosted": ap_b, "ap_raw": ap_r})
        if config.select_best and ap_b > best_ap:
            best_ap, best_params = ap_b, params.copy()
    if config.select_best:
        return TrainResult(best_params, metrics)
    return TrainResult(params, metrics)


def metrics_to_csv(metrics):
    """Render metrics rows as deterministic CSV text (repr'd floats)."""
    lines = [",".join(METRICS_COLUMNS)]
    for row in metrics:
        lines.append(",".join(
            repr(row[c]) if isinstance(row[c], float) else str(row[c])
            for c in METRICS_COLUMNS))
    return "\n".join(lines) + "\n"
