"""Optimizers and the self-supervised pre-training loop."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ParamSet
from .contrastive import ContrastiveConfig, batch_loss, build_positive_index, collapse_metrics
from .encoders import EncoderBundle, embed, encode
from .errors import ConfigError, ContractError, NumericError
from .seeding import substream
from .views import AugmentationConfig, make_views

SGD = "SGD"
ADAM = "Adam"
PROBE_SIZE = 64


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = ADAM
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 120
    # multiplier on learning_rate for pre-trained backbone weights when finetuning
    backbone_lr_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in (SGD, ADAM):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.backbone_lr_scale < 0:
            raise ConfigError("backbone_lr_scale must be >= 0")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    moments: dict = field(default_factory=dict)
    rng_state: dict | None = None
    loss_history: list = field(default_factory=list)
    collapse_history: list = field(default_factory=list)
    best_loss: float = float("inf")

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "step": self.step,
            "moments": {k: [m.ravel().tolist() for m in v] for k, v in sorted(self.moments.items())},
            "moment_shapes": {k: [list(m.shape) for m in v] for k, v in sorted(self.moments.items())},
            "rng_state": self.rng_state,
            "loss_history": self.loss_history,
            "collapse_history": self.collapse_history,
            "best_loss": self.best_loss,
        }

    @classmethod
    def from_dict(cls, d):
        moments = {k: [np.asarray(v, dtype=np.float64).reshape(s) for v, s in zip(vals, d["moment_shapes"][k])]
                   for k, vals in d["moments"].items()}
        return cls(d["epoch"], d["step"], moments, d["rng_state"], list(d["loss_history"]),
                   list(d["collapse_history"]), d["best_loss"])


def optimizer_step(params: ParamSet, cfg: OptimizerConfig, state: TrainState, grads=None, lr_scale=None):
    """One SGD-momentum or Adam update, parameters visited in sorted-name order.

    ``grads`` maps names to arrays; by default each parameter's ``.grad`` is
    used.  ``lr_scale`` optionally maps names to learning-rate multipliers.
    """
    state.step += 1
    t = state.step
    for name, p in params.sorted_items():
        lr = cfg.learning_rate * (1.0 if lr_scale is None else lr_scale.get(name, 1.0))
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise ContractError(f"no gradient for parameter {name!r}")
        if cfg.kind == SGD:
            if cfg.momentum:
                (v,) = state.moments.setdefault(name, [np.zeros_like(p.values)])
                v *= cfg.momentum
                v += g
                g = v
            p.values -= lr * g
        else:
            m, v = state.moments.setdefault(name, [np.zeros_like(p.values), np.zeros_like(p.values)])
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** t)
            v_hat = v / (1 - cfg.beta2 ** t)
            p.values -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def epoch_batches(samples, batch_size, rng):
    """Shuffled sample batches; a trailing batch with fewer than 2 samples is dropped."""
    order = rng.permutation(len(samples))
    batches = [[samples[i] for i in order[k:k + batch_size]] for k in range(0, len(order), batch_size)]
    return [b for b in batches if len(b) >= 2]


def assemble_views(batch, modality_ids, aug, rng):
    records, images = [], {mid: [] for mid in modality_ids}
    rows = {mid: [] for mid in modality_ids}
    for sample in batch:
        for rec, img in make_views(sample, modality_ids, aug, rng, first_view_id=len(records)):
            rows[rec.modality_id].append(len(records))
            records.append(rec)
            images[rec.modality_id].append(img)
    return records, {m: np.stack(v) for m, v in images.items()}, rows


def batch_embeddings(bundle, images, rows, n_views):
    """Embed each modality's stack and scatter rows back into view order."""
    parts, order = [], []
    for mid in sorted(images):
        parts.append(embed(bundle, mid, images[mid]))
        order.extend(rows[mid])
    stacked = ad.concat(parts, axis=0)
    inverse = np.empty(n_views, dtype=np.int64)
    inverse[np.asarray(order)] = np.arange(n_views)
    return ad.take_rows(stacked, inverse)


def contrastive_step(bundle, batch, modality_ids, ccfg, aug, rng):
    """Forward one batch; returns (graph, loss, records) or None when no view contributes."""
    records, images, rows = assemble_views(batch, modality_ids, aug, rng)
    index = build_positive_index(records)
    if not index.contributing:
        return None
    with Graph() as g:
        emb = batch_embeddings(bundle, images, rows, len(records))
        loss = batch_loss(records, index, ccfg, embeddings=emb)
    return g, loss, records


def probe_metrics(bundle, samples, modality_ids):
    """Collapse diagnostics on the unaugmented representations of up to 64 samples."""
    probe = samples[:PROBE_SIZE]
    out = {}
    for mid in modality_ids:
        reps = encode(bundle, mid, np.stack([s.images[mid] for s in probe])).values
        m = collapse_metrics(reps)
        out[bundle.modalities[mid].name] = {
            "effective_rank": m["effective_rank"],
            "per_dim_std_mean": float(np.mean(m["per_dim_std"])),
            "mean_pairwise_similarity": m["mean_pairwise_similarity"],
        }
    return out


class Pretrainer:
    """Stateful pre-training run that can be saved and resumed mid-way."""

    def __init__(self, dataset, modality_ids, encoder_specs, contrastive_cfg: ContrastiveConfig,
                 aug_cfg: AugmentationConfig, opt_cfg: OptimizerConfig, seed, samples=None):
        self.dataset = dataset
        self.modality_ids = sorted(modality_ids)
        if not aug_cfg.enabled and len(self.modality_ids) < 2:
            raise ConfigError("pre-training without augmentations cannot be done on a single modality")
        if not self.modality_ids:
            raise ConfigError("no modalities selected for pre-training")
        self.samples = list(dataset.samples if samples is None else samples)
        self.ccfg, self.aug, self.opt = contrastive_cfg, aug_cfg, opt_cfg
        self.seed = seed
        mods = [dataset.modality(m) for m in self.modality_ids]
        self.bundle = EncoderBundle.initialize(mods, {m: encoder_specs[m] for m in self.modality_ids}, seed)
        self.params = self.bundle.all_params()
        self.rng = np.random.default_rng(substream(seed, "pretrain", "loop"))
        self.state = TrainState()
        self.best_params = None

    def run_epoch(self):
        t0 = time.perf_counter()
        losses = []
        for batch in epoch_batches(self.samples, self.opt.batch_size, self.rng):
            step = contrastive_step(self.bundle, batch, self.modality_ids, self.ccfg, self.aug, self.rng)
            if step is None:
                continue
            graph, loss, records = step
            self.params.zero_grad()
            ad.backward(graph, loss)
            optimizer_step(self.params, self.opt, self.state)
            losses.append(loss.item())
        if not losses:
            raise ContractError("epoch produced no contributing batches")
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise NumericError(f"non-finite mean loss at epoch {self.state.epoch + 1}")
        self.state.epoch += 1
        self.state.loss_history.append(mean_loss)
        metrics = probe_metrics(self.bundle, self.samples, self.modality_ids)
        self.state.collapse_history.append(metrics)
        if mean_loss < self.state.best_loss:
            self.state.best_loss = mean_loss
            self.best_params = self.params.copy()
        return {"epoch": self.state.epoch, "mean_loss": mean_loss, "metrics": metrics,
                "wall_seconds": time.perf_counter() - t0}

    def fit(self, epochs=None, on_epoch=None):
        target = self.opt.epochs if epochs is None else epochs
        log = []
        while self.state.epoch < target:
            try:
                row = self.run_epoch()
            except NumericError as exc:
                raise NumericError(f"{exc} (pretrain modalities {self.bundle.names()}, "
                                   f"batch_size {self.opt.batch_size}, epoch {self.state.epoch + 1})") from exc
            log.append(row)
            if on_epoch is not None:
                on_epoch(row)
        return log

    def save_state(self, path):
        self.state.rng_state = self.rng.bit_generator.state
        data = {"state": self.state.to_dict(), "params": self.params.to_dict(),
                "best_params": None if self.best_params is None else self.best_params.to_dict()}
        with open(path, "w") as fh:
            json.dump(data, fh)

    def load_state(self, path):
        with open(path) as fh:
            data = json.load(fh)
        self.state = TrainState.from_dict(data["state"])
        self.rng.bit_generator.state = self.state.rng_state
        loaded = ParamSet.from_dict(data["params"])
        for name, p in self.params.items():
            p.values[...] = loaded[name].values
        if data["best_params"] is not None:
            self.best_params = ParamSet.from_dict(data["best_params"])


def pretrain(dataset, modality_ids, encoder_specs, contrastive_cfg, aug_cfg, opt_cfg, seed,
             samples=None, out_dir=None, fingerprint=None):
    """Run contrastive pre-training; returns (bundle, per-epoch log).

    With ``out_dir``, writes ``final.json``, ``best.json`` (bundle
    checkpoints), a ``train_log.csv`` and a ``checkpoint_meta.json`` sidecar.
    """
    trainer = Pretrainer(dataset, modality_ids, encoder_specs, contrastive_cfg, aug_cfg, opt_cfg, seed,
                         samples=samples)
    log = trainer.fit()
    if out_dir is not None:
        write_outputs(trainer, log, out_dir, fingerprint)
    return trainer.bundle, log


def bundle_with_params(bundle, params):
    best = bundle.subset(bundle.modality_ids)
    for mid in best.modality_ids:
        for name, t in best.params[mid].items():
            t.values[...] = params[name].values
    return best


def save_bundle(bundle, path, fingerprint=None):
    data = bundle.to_dict()
    data["config_fingerprint"] = fingerprint
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_bundle(path):
    with open(path) as fh:
        data = json.load(fh)
    return EncoderBundle.from_dict(data), data.get("config_fingerprint")


def write_outputs(trainer: Pretrainer, log, out_dir, fingerprint=None):
    os.makedirs(out_dir, exist_ok=True)
    save_bundle(trainer.bundle, os.path.join(out_dir, "final.json"), fingerprint)
    best = trainer.best_params or trainer.params
    save_bundle(bundle_with_params(trainer.bundle, best), os.path.join(out_dir, "best.json"), fingerprint)
    names = trainer.bundle.names()
    with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"] + [f"effective_rank_{n}" for n in names]
                   + ["per_dim_std_mean", "wall_seconds"])
        for row in log:
            m = row["metrics"]
            w.writerow([row["epoch"], repr(row["mean_loss"])]
                       + [repr(m[n]["effective_rank"]) for n in names]
                       + [repr(float(np.mean([m[n]["per_dim_std_mean"] for n in names]))),
                          f"{row['wall_seconds']:.3f}"])
    trainer.state.rng_state = trainer.rng.bit_generator.state
    meta = {"config_fingerprint": fingerprint, "seed": trainer.seed, "epochs": trainer.state.epoch,
            "rng_state": trainer.state.rng_state, "optimizer": asdict(trainer.opt),
            "contrastive": asdict(trainer.ccfg), "augmentation": asdict(trainer.aug)}
    with open(os.path.join(out_dir, "checkpoint_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
