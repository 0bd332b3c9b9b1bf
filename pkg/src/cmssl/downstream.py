"""Downstream classification over concatenated per-modality representations."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ParamSet
from .encoders import EncoderBundle, encode
from .errors import ConfigError, ContractError
from .seeding import substream
from .trainer import OptimizerConfig, TrainState, epoch_batches, optimizer_step
from .views import CLASS_NAMES

NUM_CLASSES = len(CLASS_NAMES)
VAL_FRACTION = 0.2


def fuse(inputs):
    """Concatenate ``(modality_id, vector)`` pairs in ascending modality order."""
    ids = [mid for mid, _ in inputs]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate modality in fusion input: {ids}")
    ordered = sorted(inputs, key=lambda pair: pair[0])
    if len(ordered) == 1:
        return ad.as_tensor(ordered[0][1])
    return ad.concat([v for _, v in ordered], axis=-1)


def split_of(sample_id):
    """Deterministic 80/20 train/validation assignment by hashing the sample id."""
    h = hashlib.blake2b(str(int(sample_id)).encode(), digest_size=8).digest()
    return "val" if int.from_bytes(h, "little") / 2 ** 64 < VAL_FRACTION else "train"


def train_val_split(dataset):
    labeled = dataset.labeled()
    train = [s for s in labeled if split_of(s.sample_id) == "train"]
    val = [s for s in labeled if split_of(s.sample_id) == "val"]
    return train, val


def pretraining_pool(dataset):
    """Samples seen by self-supervised pre-training: the train split plus the negative pool.

    Validation images are held out so downstream accuracy never rests on
    representations fitted to the evaluation samples.
    """
    train, _ = train_val_split(dataset)
    train_ids = {s.sample_id for s in train}
    return [s for s in dataset.samples if s.is_negative or s.sample_id in train_ids]


class FusionClassifierModel:
    """Backbones for a set of modalities plus one dense head on their fused output."""

    def __init__(self, bundle: EncoderBundle, head: ParamSet, finetune_backbone=True):
        self.bundle = bundle
        self.head = head
        self.finetune_backbone = finetune_backbone

    @property
    def modality_ids(self):
        return self.bundle.modality_ids

    def trainable(self):
        params = ParamSet()
        if self.finetune_backbone:
            for name, t in self.bundle.all_params().items():
                params[name] = t
        for name, t in self.head.items():
            params[name] = t
        return params

    def features(self, images):
        return fuse([(mid, encode(self.bundle, mid, images[mid])) for mid in self.modality_ids])

    def logits(self, images):
        return ad.dense(self.features(images), self.head["head/W"], self.head["head/b"])


def init_head(in_dim, seed, num_classes=NUM_CLASSES):
    rng = np.random.default_rng(seed)
    a = np.sqrt(6.0 / (in_dim + num_classes))
    head = ParamSet()
    head.add("head/W", rng.uniform(-a, a, size=(in_dim, num_classes)))
    head.add("head/b", np.zeros(num_classes))
    return head


def _images(samples, modality_ids):
    return {mid: np.stack([s.images[mid] for s in samples]) for mid in modality_ids}


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list
    confusion: np.ndarray
    fingerprint: dict = field(default_factory=dict)

    def to_dict(self):
        return {"accuracy": self.accuracy, "per_class_accuracy": self.per_class_accuracy,
                "confusion": self.confusion.tolist(), "fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d):
        return cls(d["accuracy"], list(d["per_class_accuracy"]), np.asarray(d["confusion"], dtype=np.int64),
                   dict(d.get("fingerprint", {})))


def report_from_predictions(y_true, y_pred, num_classes=NUM_CLASSES, fingerprint=None):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ContractError("cannot evaluate on an empty split")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    support = conf.sum(axis=1)
    per_class = [float(conf[c, c] / support[c]) if support[c] else float("nan") for c in range(num_classes)]
    return EvalReport(float(np.trace(conf) / conf.sum()), per_class, conf, dict(fingerprint or {}))


def predict(model: FusionClassifierModel, samples):
    logits = model.logits(_images(samples, model.modality_ids)).values
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(model: FusionClassifierModel, samples, fingerprint=None) -> EvalReport:
    if not samples:
        raise ContractError("cannot evaluate on an empty split")
    y = [s.class_label for s in samples]
    return report_from_predictions(y, predict(model, samples), fingerprint=fingerprint)


def build_model(modality_names_or_ids, dataset, encoder_specs, seed, checkpoint=None, finetune_backbone=True):
    """Model for the requested modalities, from a pre-trained bundle or random init."""
    ids = dataset.modality_ids(modality_names_or_ids)
    if not ids:
        raise ConfigError("no finetune modalities given")
    if checkpoint is not None:
        missing = [dataset.modality(i).name for i in ids if i not in checkpoint.modalities]
        if missing:
            raise ConfigError(f"finetune modalities {missing} were not pre-trained in this checkpoint "
                              f"(has {checkpoint.names()})")
        bundle = checkpoint.subset(ids, drop_projection=True)
    else:
        mods = [dataset.modality(i) for i in ids]
        bundle = EncoderBundle.initialize(mods, {i: encoder_specs[i] for i in ids}, substream(seed, "random-init"))
    in_dim = sum(bundle.specs[i].output_dim for i in ids)
    head = init_head(in_dim, substream(seed, "head", *ids))
    return FusionClassifierModel(bundle, head, finetune_backbone)


def finetune(dataset, modality_names_or_ids, opt_cfg: OptimizerConfig, seed, checkpoint=None,
             encoder_specs=None, finetune_backbone=True, fingerprint=None):
    """Train the fused classifier on the train split; return (model, validation EvalReport)."""
    model = build_model(modality_names_or_ids, dataset, encoder_specs, seed, checkpoint, finetune_backbone)
    train, val = train_val_split(dataset)
    fit_model(model, train, opt_cfg, seed)
    fp = {"finetune_modalities": [dataset.modality(i).name for i in model.modality_ids],
          "pretrained": checkpoint is not None, "seed": seed, "finetune_backbone": finetune_backbone}
    fp.update(fingerprint or {})
    return model, evaluate(model, val, fp)


def fit_model(model: FusionClassifierModel, train, opt_cfg: OptimizerConfig, seed):
    if not train:
        raise ContractError("empty training split")
    rng = np.random.default_rng(substream(seed, "finetune", "loop", *model.modality_ids))
    params = model.trainable()
    scales = {name: opt_cfg.backbone_lr_scale for name in params if not name.startswith("head/")}
    state = TrainState()
    for _ in range(opt_cfg.epochs):
        for batch in epoch_batches(train, opt_cfg.batch_size, rng):
            images = _images(batch, model.modality_ids)
            targets = np.array([s.class_label for s in batch])
            with Graph() as g:
                loss = ad.softmax_cross_entropy(model.logits(images), targets)
            params.zero_grad()
            ad.backward(g, loss)
            optimizer_step(params, opt_cfg, state, lr_scale=scales)
    return model
