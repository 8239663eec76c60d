"""Toy-scale training: hint-loss pretraining and pseudo-label fine-tuning with
SGD plus momentum under a piecewise-constant learning-rate schedule, and the
five-row distillation ablation harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import distill, metrics
from .data_io import load_image, load_map, load_teacher_bundle, load_fixations
from .errors import ConfigError, NumericDomainError
from .network import trainable_slots
from .tensor import Tape, Tensor

ADAPT_LAYERS = tuple(f"decoder.adapt{i}" for i in range(1, 5))


@dataclass
class TrainConfig:
    loss: str = "salgan"              # hint | salgan | deepgaze
    use_gt: bool = True
    use_teacher: bool = True
    epochs: int = 10
    base_lr: float = 0.01
    decay_epochs: tuple = (15, 30, 60)
    decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    max_steps: int | None = None
    validate_metrics: bool = False

    def check(self):
        if self.loss not in ("hint", "salgan", "deepgaze"):
            raise ConfigError(f"unknown loss kind '{self.loss}'")
        if self.loss != "hint" and not (self.use_gt or self.use_teacher):
            raise ConfigError("fine-tuning needs use_gt or use_teacher (or both)")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigError("decay epochs must be strictly increasing")
        return self


def lr_schedule(config, epoch):
    """Piecewise-constant rate: divided by the decay factor's reciprocal at
    each listed epoch (0.01 -> 0.001 at 15 -> 1e-4 at 30 -> 1e-5 at 60)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    decays = sum(1 for e in config.decay_epochs if epoch >= e)
    return config.base_lr * (config.decay_factor ** decays)


def sgd_step(params, grads, lr, momentum_state, momentum=0.9):
    """Classical momentum: v <- mu*v + g; w <- w - lr*v. params is a list of
    (slot name, Tensor); updates happen in place."""
    for (slot, tensor), grad in zip(params, grads):
        if not np.all(np.isfinite(grad)):
            raise NumericDomainError(f"non-finite gradient for '{slot}'; step aborted")
        v = momentum_state.get(slot)
        v = grad if v is None else momentum * v + grad
        momentum_state[slot] = v
        tensor.data -= lr * v


@dataclass
class LogRow:
    epoch: int
    lr: float
    mean_loss: float
    nss: float | None = None
    cc: float | None = None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "mean_loss", "nss", "cc"])
            for r in self.rows:
                w.writerow([r.epoch, r.lr, f"{r.mean_loss:.6f}",
                            "" if r.nss is None else f"{r.nss:.6f}",
                            "" if r.cc is None else f"{r.cc:.6f}"])


def _load_records(manifest, config, size):
    """Materialize manifest records as tensors; fail fast when a record lacks
    the data the configured loss needs."""
    out = []
    for rec in manifest:
        item = {"image": load_image(rec.image, size=size)}
        bundle = load_teacher_bundle(rec.teacher) if rec.teacher else None
        if rec.gt:
            item["gt"] = load_map(rec.gt, size=size)
        if rec.fix:
            item["fix"] = load_fixations(rec.fix, bounds=size)
        if config.loss == "hint":
            if bundle is None or bundle.hint_features is None:
                raise ConfigError(
                    f"record '{rec.image}' lacks teacher hint features for hint loss")
            item["hint"] = bundle.hint_features
        elif config.loss == "salgan":
            if config.use_gt and "gt" not in item:
                raise ConfigError(f"record '{rec.image}' lacks a gt map (use_gt on)")
            if config.use_teacher:
                if bundle is None or bundle.pseudo_map is None:
                    raise ConfigError(
                        f"record '{rec.image}' lacks a teacher pseudo map")
                item["pseudo"] = bundle.pseudo_map
        elif config.loss == "deepgaze":
            if bundle is None or bundle.pseudo_dist is None:
                raise ConfigError(
                    f"record '{rec.image}' lacks a teacher pseudo distribution")
            item["dist"] = bundle.pseudo_dist
        out.append(item)
    return out


def _stack(tensors):
    return Tensor(np.concatenate([t.data for t in tensors], axis=0))


def _batch_loss(graph, store, batch, config, training):
    if config.loss == "hint":
        x = _stack([b["image"] for b in batch])
        res = graph.run(store, x, training=training, want=ADAPT_LAYERS)
        student = [res[n] for n in ADAPT_LAYERS]
        teacher = [_stack([b["hint"][i] for b in batch]) for i in range(4)]
        return distill.hint_loss(student, teacher)
    x = _stack([b["image"] for b in batch])
    logits = graph.run(store, x, training=training)["out"]
    if config.loss == "salgan":
        gt = _stack([b["gt"] for b in batch]) if config.use_gt else None
        pseudo = _stack([b["pseudo"] for b in batch]) if config.use_teacher else None
        return distill.salgan_loss(logits, gt=gt, pseudo=pseudo)
    return distill.deepgaze_loss(logits, _stack([b["dist"] for b in batch]))


def _trainable_params(graph, store, config):
    slots = trainable_slots(store)
    if config.loss == "hint":
        # pretraining updates the backbone and the adaptation layers only
        slots = [s for s in slots
                 if s.startswith("backbone.") or s.startswith("decoder.adapt")]
    return [(s, store.get(s)) for s in slots]


def _validation(graph, store, records, size):
    nss_vals, cc_vals = [], []
    for item in records:
        pred = graph.run(store, item["image"])["out"].data[0, 0]
        if "fix" in item and item["fix"]:
            nss_vals.append(metrics.nss(pred, item["fix"]))
        if "gt" in item:
            cc_vals.append(metrics.cc(pred, item["gt"].data[0, 0]))
    return (float(np.mean(nss_vals)) if nss_vals else None,
            float(np.mean(cc_vals)) if cc_vals else None)


def train(manifest, config, graph, store):
    """Run the configured loss over the manifest for config.epochs, returning
    a per-epoch TrainLog. Deterministic for a fixed seed."""
    config.check()
    size = graph.input_shape[2:]
    records = _load_records(manifest, config, size)
    params = _trainable_params(graph, store, config)
    frozen = not params
    for slot, t in params:
        t.requires_grad = True
    rng = np.random.default_rng(config.seed)
    momentum_state = {}
    log = TrainLog()
    step = 0
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(config, epoch)
            order = rng.permutation(len(records))
            losses = []
            for start in range(0, len(records), config.batch_size):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                batch = [records[i] for i in order[start:start + config.batch_size]]
                with Tape() as tape:
                    loss = _batch_loss(graph, store, batch, config,
                                       training=not frozen)
                losses.append(float(loss.data.reshape(())))
                if not frozen:
                    grads = tape.gradients(loss, [t for _, t in params])
                    sgd_step(params, grads, lr, momentum_state, config.momentum)
                step += 1
            if not losses:
                break
            nss_val = cc_val = None
            if config.validate_metrics:
                nss_val, cc_val = _validation(graph, store, records, size)
            log.rows.append(LogRow(epoch, lr, float(np.mean(losses)),
                                   nss_val, cc_val))
            if config.max_steps is not None and step >= config.max_steps:
                break
    finally:
        for slot, t in params:
            t.requires_grad = False
    return log


# Table-style ablation rows: (pretrain with hint loss, fine-tune against the
# teacher pseudo maps, use the ground truth)
ABLATION_ROWS = (
    (False, True, False),
    (True, True, False),
    (False, False, True),
    (False, True, True),
    (True, True, True),
)


def ablation_run(manifest, graph, init_store_fn, config=None):
    """Run the five pretrain/finetune/gt combinations and report NSS/CC for
    each. init_store_fn() must return a fresh weight store per row."""
    base = (config or TrainConfig(epochs=2)).check()
    results = []
    for pretrain, finetune, use_gt in ABLATION_ROWS:
        store = init_store_fn()
        if pretrain:
            pre = replace(base, loss="hint", validate_metrics=False)
            train(manifest, pre, graph, store)
        fine = replace(base, loss="salgan", use_gt=use_gt, use_teacher=finetune,
                       validate_metrics=False)
        train(manifest, fine, graph, store)
        records = _load_records(manifest, replace(base, loss="salgan",
                                                  use_gt=False, use_teacher=False),
                                graph.input_shape[2:])
        nss_val, cc_val = _validation(graph, store, records, graph.input_shape[2:])
        results.append({"pretrain": pretrain, "finetune": finetune, "gt": use_gt,
                        "nss": nss_val, "cc": cc_val})
    return results


def ablation_csv(results, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pretrain", "finetune", "gt", "nss", "cc"])
        for r in results:
            w.writerow([int(r["pretrain"]), int(r["finetune"]), int(r["gt"]),
                        "" if r["nss"] is None else f"{r['nss']:.6f}",
                        "" if r["cc"] is None else f"{r['cc']:.6f}"])
