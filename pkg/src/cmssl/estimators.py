"""scikit-learn style estimators over multi-modal image arrays.

Inputs are mappings ``{modality name: array (n, channels, height, width)}``.
Labels are class indices 0..5, with -1 marking negative-class samples, which
pre-training uses only as contrastive negatives.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .contrastive import ContrastiveConfig
from .downstream import FusionClassifierModel, fit_model, init_head
from .encoders import EncoderBundle, ModalitySpec, default_encoder_spec, encode
from .errors import ConfigError, DimensionError
from .seeding import substream
from .trainer import OptimizerConfig, Pretrainer
from .views import NEGATIVE, AugmentationConfig, Dataset, Sample

NUM_CLASSES = 6


def check_multimodal(X, modalities=None):
    """Validate a modality -> image-stack mapping; returns it as float64 arrays.

    All stacks must be 4-d, finite and share the sample count.  When
    ``modalities`` is given each must be present.
    """
    if not hasattr(X, "items"):
        raise TypeError(f"expected a mapping of modality name to image array, got {type(X).__name__}")
    out = {}
    for name, arr in X.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(f"modality {name!r}: expected (n, channels, height, width), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"modality {name!r} contains NaN or infinity")
        out[name] = arr
    if not out:
        raise ValueError("no modalities given")
    counts = {len(a) for a in out.values()}
    if len(counts) != 1:
        raise DimensionError(f"modalities disagree on the number of samples: {sorted(counts)}")
    if counts == {0}:
        raise ValueError("found 0 samples")
    if modalities is not None:
        missing = [m for m in modalities if m not in out]
        if missing:
            raise ConfigError(f"missing modalities {missing}")
    return out


def check_labels(y, n, allow_negative=False):
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    low = NEGATIVE if allow_negative else 0
    if np.any((y < low) | (y >= NUM_CLASSES)):
        raise ValueError(f"labels must lie in [{low}, {NUM_CLASSES})")
    return y


def _dataset(X, names, y=None, specs=None):
    mods = specs or [ModalitySpec(i, n, *X[n].shape[1:]) for i, n in enumerate(names)]
    n = len(X[names[0]])
    labels = np.zeros(n, dtype=np.int64) if y is None else y
    samples = [Sample(i, int(labels[i]), {m.modality_id: X[m.name][i] for m in mods}) for i in range(n)]
    return Dataset(mods, samples)


class ContrastivePretrainer(TransformerMixin, BaseEstimator):
    """Multi-modal contrastive pre-training; ``transform`` returns fused representations."""

    def __init__(self, modalities=("S1", "S2", "NAIP"), temperature=0.1, augment=True, epochs=120,
                 learning_rate=1e-3, batch_size=32, encoder_specs=None, seed=0):
        self.modalities = modalities
        self.temperature = temperature
        self.augment = augment
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.encoder_specs = encoder_specs
        self.seed = seed

    def fit(self, X, y=None):
        names = list(self.modalities)
        X = check_multimodal(X, names)
        labels = None if y is None else check_labels(y, len(X[names[0]]), allow_negative=True)
        ds = _dataset(X, names, labels)
        specs = {m.modality_id: (self.encoder_specs or {}).get(m.name, default_encoder_spec(m))
                 for m in ds.modalities}
        trainer = Pretrainer(ds, [m.modality_id for m in ds.modalities], specs,
                             ContrastiveConfig(temperature=self.temperature),
                             AugmentationConfig(enabled=self.augment),
                             OptimizerConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                                             epochs=self.epochs), self.seed)
        self.training_log_ = trainer.fit()
        self.bundle_ = trainer.bundle
        self.modality_specs_ = list(ds.modalities)
        self.n_features_out_ = sum(s.output_dim for s in self.bundle_.specs.values())
        return self

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        X = check_multimodal(X, [m.name for m in self.modality_specs_])
        parts = []
        for m in self.modality_specs_:
            if X[m.name].shape[1:] != m.shape:
                raise DimensionError(f"modality {m.name}: expected images {m.shape}, got {X[m.name].shape[1:]}")
            parts.append(encode(self.bundle_, m.modality_id, X[m.name]).values)
        return np.concatenate(parts, axis=1)


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Concatenation-fusion classifier, optionally starting from pre-trained encoders.

    ``pretrained`` may be a fitted :class:`ContrastivePretrainer` or an
    :class:`EncoderBundle`; ``None`` trains from random initialization.
    """

    def __init__(self, modalities=("S1",), pretrained=None, finetune_backbone=True, epochs=100,
                 learning_rate=1e-3, batch_size=32, encoder_specs=None, seed=0):
        self.modalities = modalities
        self.pretrained = pretrained
        self.finetune_backbone = finetune_backbone
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.encoder_specs = encoder_specs
        self.seed = seed

    def _source_bundle(self):
        src = self.pretrained
        if src is None:
            return None
        if isinstance(src, ContrastivePretrainer):
            check_is_fitted(src, "bundle_")
            return src.bundle_
        if isinstance(src, EncoderBundle):
            return src
        raise TypeError("pretrained must be a fitted ContrastivePretrainer, an EncoderBundle or None")

    def fit(self, X, y):
        names = list(self.modalities)
        X = check_multimodal(X, names)
        y = check_labels(y, len(X[names[0]]))
        source = self._source_bundle()
        if source is not None:
            by_name = {m.name: m for m in source.modalities.values()}
            missing = [n for n in names if n not in by_name]
            if missing:
                raise ConfigError(f"finetune modalities {missing} were not pre-trained")
            mods = [by_name[n] for n in names]
            bundle = source.subset([m.modality_id for m in mods], drop_projection=True)
        else:
            mods = [ModalitySpec(i, n, *X[n].shape[1:]) for i, n in enumerate(names)]
            specs = {m.modality_id: (self.encoder_specs or {}).get(m.name, default_encoder_spec(m)) for m in mods}
            bundle = EncoderBundle.initialize(mods, specs, substream(self.seed, "random-init"))
        ds = _dataset(X, names, y, specs=mods)
        ids = bundle.modality_ids
        in_dim = sum(bundle.specs[i].output_dim for i in ids)
        head = init_head(in_dim, substream(self.seed, "head", *ids))
        model = FusionClassifierModel(bundle, head, self.finetune_backbone)
        opt = OptimizerConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs)
        fit_model(model, ds.samples, opt, self.seed)
        self.model_ = model
        self.modality_specs_ = sorted(mods, key=lambda m: m.modality_id)
        self.classes_ = np.arange(NUM_CLASSES)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_multimodal(X, [m.name for m in self.modality_specs_])
        images = {}
        for m in self.modality_specs_:
            if X[m.name].shape[1:] != m.shape:
                raise DimensionError(f"modality {m.name}: expected images {m.shape}, got {X[m.name].shape[1:]}")
            images[m.modality_id] = X[m.name]
        return self.model_.logits(images).values

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        # argmax keeps the first maximum, so ties go to the lowest class index
        return self.classes_[np.argmax(scores, axis=1)]
