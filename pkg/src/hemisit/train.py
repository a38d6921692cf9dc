"""Training loop, evaluation and the ablation variants."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .errors import ConfigurationError, InputError, NonFiniteError
from .heads import MetricsReport, check_loss_weights, compute_metrics, joint_loss
from .model import VARIANTS, SITModel
from .optim import AdamState, adam_step
from .tensor import Tape

log = logging.getLogger(__name__)

# JSON key -> dataclass field where they differ
_ALIASES = {"lambda": "lam", "gamma": "gam"}


@dataclass
class ModelConfig:
    variant: str = "lrcnn_sit_flip"
    patch_size: int = 8
    n_units: int = 5
    n_heads: int = 4
    lam: float = 0.25
    gam: float = 0.25
    batch_size: int = 4
    epochs: int = 70
    seed: int = 0
    flip: bool | None = None       # None: the variant's own choice
    freeze_beta: bool = False      # pin every unit's beta at its initial 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        check_loss_weights(self.lam, self.gam)
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.n_heads < 1 or 128 % self.n_heads:
            raise ConfigurationError(f"n_heads={self.n_heads} must divide d_model=128")
        if self.n_units < 0:
            raise ConfigurationError("n_units must be >= 0")

    def to_dict(self):
        inv = {v: k for k, v in _ALIASES.items()}
        return {inv.get(k, k): v for k, v in asdict(self).items()}

    @classmethod
    def keys(cls):
        inv = {v: k for k, v in _ALIASES.items()}
        return [inv.get(f.name, f.name) for f in fields(cls)]

    @classmethod
    def from_dict(cls, d):
        known = set(cls.keys())
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**{_ALIASES.get(k, k): v for k, v in d.items()})


def build_model(config: ModelConfig) -> SITModel:
    model = SITModel(config.variant, config.patch_size, config.n_units, config.n_heads,
                     seed=config.seed, flip=config.flip)
    if config.freeze_beta and model.has_sit:
        for unit in model.sit.units:
            unit.beta.requires_grad = False
    return model


def lr_schedule(epoch: int) -> float:
    if epoch < 0:
        raise InputError("epoch must be >= 0")
    if epoch < 30:
        return 1e-4
    if epoch < 50:
        return 3e-5
    return 1e-5


@dataclass
class TrainState:
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_val_acc: float = -1.0
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    best_state: dict | None = None
    checkpoint_path: str | None = None
    history: list = field(default_factory=list)


def batch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _loss_for(model, config, fwd, labels):
    if model.variant == "wcnn":
        return joint_loss(None, None, fwd.logits_all, labels, 0.0, 0.0)
    return joint_loss(fwd.logits_l, fwd.logits_r, fwd.logits_all, labels, config.lam, config.gam)


def train_step(model, config, params, state, xb, yb, lr):
    """One forward/backward/Adam update.  Returns (parts dict of floats, predictions)."""
    model.train()
    with Tape() as tape:
        # a single sample gives too few values to trust for running statistics
        fwd = model(xb, update_stats=len(xb) > 1)
        total, parts = _loss_for(model, config, fwd, yb)
    for p in params:
        p.grad = None
    tape.backward(total)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    adam_step(params, grads, state.adam, lr)
    vals = {k: (v.item() if v is not None else None) for k, v in parts.items()}
    vals["loss"] = total.item()
    pred = fwd.logits_all.data.argmax(axis=1)
    return vals, pred


def train_epoch(state: TrainState, model: SITModel, volumes, labels, config: ModelConfig):
    """Run one epoch of seeded mini-batches; append nothing, return the epoch record."""
    n = len(labels)
    lr = lr_schedule(state.epoch)
    params = model.parameters()
    order = batch_order(n, config.seed, state.epoch)
    sums = {}
    correct = 0
    for b, start in enumerate(range(0, n, config.batch_size)):
        idx = order[start:start + config.batch_size]
        try:
            vals, pred = train_step(model, config, params, state, volumes[idx], labels[idx], lr)
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {state.epoch} batch {b}: {exc}") from exc
        correct += int((pred == labels[idx]).sum())
        for k, v in vals.items():
            if v is not None:
                sums[k] = sums.get(k, 0.0) + v * len(idx)
    rec = {"epoch": state.epoch, "lr": lr}
    for k in ("loss", "loss_all", "loss_l", "loss_r"):
        rec[k] = sums[k] / n if k in sums else None
    rec["train_acc"] = correct / n
    state.epoch += 1
    return rec


def predict(model: SITModel, volumes, batch_size=8):
    """Final-head class probabilities in eval mode."""
    was = model.training
    model.eval()
    try:
        out = []
        for i in range(0, len(volumes), batch_size):
            fwd = model(volumes[i:i + batch_size], update_stats=False)
            out.append(ops.softmax(fwd.logits_all, axis=-1).data)
        return np.concatenate(out)
    finally:
        model.train(was)


def evaluate(model: SITModel, volumes, labels) -> MetricsReport:
    if len(labels) == 0:
        raise InputError("cannot evaluate on an empty split")
    return compute_metrics(predict(model, volumes)[:, 1], labels)


def _eval_with_loss(model, volumes, labels):
    probs = predict(model, volumes)
    nll = -np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-300, None)).mean()
    return compute_metrics(probs[:, 1], labels), float(nll)


def fit(model, config, train, val, out_dir=None, on_epoch=None, state=None):
    """Train for ``config.epochs`` epochs with best-validation selection."""
    state = state or TrainState()
    xtr, ytr = train
    xva, yva = val
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
    else:
        log_fh = None
    try:
        while state.epoch < config.epochs:
            rec = train_epoch(state, model, xtr, ytr, config)
            if len(yva):
                rep, vloss = _eval_with_loss(model, xva, yva)
                rec["val_acc"], rec["val_loss"] = rep.acc, vloss
                better = rep.acc > state.best_val_acc or (rep.acc == state.best_val_acc and vloss < state.best_val_loss)
                if better:
                    state.best_val_acc, state.best_val_loss = rep.acc, vloss
                    state.best_epoch = rec["epoch"]
                    state.best_state = model.state_dict()
                    if out_dir is not None:
                        state.checkpoint_path = str(out_dir / "best.ckpt")
                        save_checkpoint(state.checkpoint_path, state.best_state)
            else:
                rec["val_acc"] = None
            state.history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(rec)
            log.info("epoch %(epoch)d lr %(lr).0e loss %(loss).4f val_acc %(val_acc)s", rec)
    finally:
        if log_fh:
            log_fh.close()
    return state


def run_variant(config: ModelConfig, manifest, out_dir=None, on_epoch=None):
    """Train one variant on a manifest; returns (model, state, test report).

    The reported test metrics come from the best-validation parameters.
    """
    splits = {name: manifest.load_split(name) for name in ("train", "val", "test")}
    for name, (_, y) in splits.items():
        if len(y) == 0:
            raise InputError(f"manifest has an empty {name} split")
    model = build_model(config)
    state = fit(model, config, splits["train"], splits["val"], out_dir=out_dir, on_epoch=on_epoch)
    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    report = evaluate(model, *splits["test"])
    if out_dir is not None:
        Path(out_dir, "test_metrics.json").write_text(report.to_json() + "\n")
    return model, state, report
