"""Experiment configuration: one JSON document drives every subcommand.

Parsing is strict. Unknown keys are rejected with their full key path, and
every value is validated before any compute starts. ``fingerprint`` hashes
the canonical (sorted-key) JSON form so outputs can record exactly which
configuration produced them.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json

from .contrastive import ContrastiveConfig
from .encoders import EncoderSpec, ModalitySpec, ProjectionHead, default_encoder_spec, default_modalities
from .errors import ConfigError
from .trainer import OptimizerConfig
from .views import AugmentationConfig, SynthSpec

CONFIG_VERSION = 1

PRETRAIN_SETS = (
    ("S1",), ("S2",), ("NAIP",),
    ("S1", "S2"), ("S1", "NAIP"), ("S2", "NAIP"), ("S1", "S2", "NAIP"),
)
STAR_SETS = (("S1", "S2"), ("S1", "NAIP"), ("S2", "NAIP"), ("S1", "S2", "NAIP"))
FINETUNE_SETS = PRETRAIN_SETS


@dataclasses.dataclass(frozen=True)
class GridRow:
    """One pre-training scenario; ``pretrain=None`` is the random-init baseline."""

    pretrain: tuple | None = None
    star: bool = False

    @property
    def label(self):
        if self.pretrain is None:
            return "None"
        return " + ".join(self.pretrain) + (" *" if self.star else "")

    def to_dict(self):
        return {"pretrain": None if self.pretrain is None else list(self.pretrain), "star": self.star}


def results_table_rows():
    rows = [GridRow()]
    rows += [GridRow(tuple(s)) for s in PRETRAIN_SETS]
    rows += [GridRow(tuple(s), star=True) for s in STAR_SETS]
    return rows


@dataclasses.dataclass(frozen=True)
class GridSpec:
    rows: tuple = dataclasses.field(default_factory=lambda: tuple(results_table_rows()))
    columns: tuple = FINETUNE_SETS
    seeds: tuple = (0, 1, 2, 3, 4)

    def to_dict(self):
        return {"rows": [r.to_dict() for r in self.rows], "columns": [list(c) for c in self.columns],
                "seeds": list(self.seeds)}


@dataclasses.dataclass(frozen=True)
class ModalityEntry:
    modality: ModalitySpec
    encoder: EncoderSpec


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    synthetic: SynthSpec | None = dataclasses.field(default_factory=SynthSpec)
    manifest: str | None = None
    modalities: list = dataclasses.field(default_factory=list)
    contrastive: ContrastiveConfig = dataclasses.field(default_factory=ContrastiveConfig)
    augmentation: AugmentationConfig = dataclasses.field(default_factory=AugmentationConfig)
    pretrain_optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    finetune_optimizer: OptimizerConfig = dataclasses.field(default_factory=lambda: OptimizerConfig(epochs=100))
    finetune_backbone: bool = True
    grid: GridSpec = dataclasses.field(default_factory=GridSpec)
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.modalities:
            self.modalities = [ModalityEntry(m, default_encoder_spec(m)) for m in default_modalities()]
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("dataset: give exactly one of 'synthetic' or 'manifest'")
        names = [e.modality.name for e in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"modalities: duplicate names {names}")
        if [e.modality.modality_id for e in self.modalities] != list(range(len(self.modalities))):
            raise ConfigError("modalities: ids must be 0..K-1 in listed order")
        if self.synthetic is not None:
            self.synthetic = dataclasses.replace(self.synthetic, modalities=[e.modality for e in self.modalities])
        known = set(names)
        for i, row in enumerate(self.grid.rows):
            if row.pretrain is not None:
                _check_names(row.pretrain, known, f"grid.rows[{i}].pretrain")
                if row.star and len(row.pretrain) < 2:
                    raise ConfigError(f"grid.rows[{i}]: pre-training without augmentations cannot be done "
                                      "on a single modality")
            elif row.star:
                raise ConfigError(f"grid.rows[{i}]: the random-init row cannot be a no-augmentation row")
        for i, col in enumerate(self.grid.columns):
            _check_names(col, known, f"grid.columns[{i}]")

    @property
    def encoder_specs(self):
        return {e.modality.modality_id: e.encoder for e in self.modalities}

    @property
    def modality_specs(self):
        return [e.modality for e in self.modalities]

    def to_dict(self):
        synth = None
        if self.synthetic is not None:
            synth = dataclasses.asdict(self.synthetic)
            synth.pop("modalities")
            synth["nonlinear_modalities"] = list(synth["nonlinear_modalities"])
        return {
            "config_version": CONFIG_VERSION,
            "seed": self.seed,
            "dataset": {"synthetic": synth, "manifest": self.manifest},
            "modalities": [{**{k: v for k, v in dataclasses.asdict(e.modality).items() if k != "modality_id"},
                            "encoder": e.encoder.to_dict()} for e in self.modalities],
            "contrastive": dataclasses.asdict(self.contrastive),
            "augmentation": dataclasses.asdict(self.augmentation),
            "optimizer": {"pretrain": dataclasses.asdict(self.pretrain_optimizer),
                          "finetune": dataclasses.asdict(self.finetune_optimizer)},
            "downstream": {"finetune_backbone": self.finetune_backbone},
            "grid": self.grid.to_dict(),
            "output_dir": self.output_dir,
        }

    def fingerprint(self):
        return fingerprint_of(self.to_dict())

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint_of(data):
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


def _check_names(names, known, path):
    unknown = [n for n in names if n not in known]
    if unknown:
        raise ConfigError(f"{path}: unknown modalities {unknown}")
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: duplicate modality")


def _keys(data, allowed, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    for key in data:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{where}'")


def _dataclass_from(cls, data, path, convert=None):
    """Build ``cls`` from a dict whose keys must be a subset of its fields."""
    fields = {f.name for f in dataclasses.fields(cls)}
    _keys(data, fields, path)
    kwargs = dict(data)
    for key, fn in (convert or {}).items():
        if key in kwargs:
            kwargs[key] = fn(kwargs[key], f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid value ({exc})") from exc


def _projection(data, path):
    return _dataclass_from(ProjectionHead, data, path)


def _modality_entry(data, path, modality_id):
    _keys(data, {"name", "channels", "height", "width", "encoder"}, path)
    for key in ("name", "channels", "height", "width"):
        if key not in data:
            raise ConfigError(f"{path}: missing key '{key}'")
    mod = _dataclass_from(ModalitySpec, {k: data[k] for k in ("name", "channels", "height", "width")}
                          | {"modality_id": modality_id}, path)
    if "encoder" in data:
        enc = _dataclass_from(EncoderSpec, data["encoder"], f"{path}.encoder", {"projection": _projection})
    else:
        enc = default_encoder_spec(mod)
    return ModalityEntry(mod, enc)


def _grid(data, path):
    _keys(data, {"rows", "columns", "seeds"}, path)
    default = GridSpec()
    rows = default.rows
    if "rows" in data:
        rows = []
        for i, r in enumerate(data["rows"]):
            rp = f"{path}.rows[{i}]"
            _keys(r, {"pretrain", "star"}, rp)
            pre = r.get("pretrain")
            rows.append(GridRow(None if pre is None else tuple(pre), bool(r.get("star", False))))
        rows = tuple(rows)
    columns = tuple(tuple(c) for c in data["columns"]) if "columns" in data else default.columns
    seeds = tuple(int(s) for s in data["seeds"]) if "seeds" in data else default.seeds
    if not seeds:
        raise ConfigError(f"{path}.seeds: need at least one seed")
    return GridSpec(rows, columns, seeds)


def from_dict(data) -> ExperimentConfig:
    """Validate and build a config from parsed JSON (missing sections take defaults)."""
    data = copy.deepcopy(data)
    _keys(data, {"config_version", "seed", "dataset", "modalities", "contrastive", "augmentation",
                 "optimizer", "downstream", "grid", "output_dir"}, "")
    if data.get("config_version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"config_version: unsupported version {data['config_version']}")
    kwargs = {}
    if "seed" in data:
        if not isinstance(data["seed"], int) or data["seed"] < 0:
            raise ConfigError("seed: must be a non-negative integer")
        kwargs["seed"] = data["seed"]
    if "modalities" in data:
        kwargs["modalities"] = [_modality_entry(m, f"modalities[{i}]", i) for i, m in enumerate(data["modalities"])]
    if "dataset" in data:
        ds = data["dataset"]
        _keys(ds, {"synthetic", "manifest"}, "dataset")
        synth = ds.get("synthetic")
        kwargs["manifest"] = ds.get("manifest")
        if synth is None:
            kwargs["synthetic"] = None if kwargs["manifest"] is not None else SynthSpec()
        else:
            fields = {f.name for f in dataclasses.fields(SynthSpec)} - {"modalities"}
            _keys(synth, fields, "dataset.synthetic")
            mods = [e.modality for e in kwargs.get("modalities", [])] or default_modalities()
            kwargs["synthetic"] = _dataclass_from(SynthSpec, {**synth, "modalities": mods}, "dataset.synthetic")
    if "contrastive" in data:
        kwargs["contrastive"] = _dataclass_from(ContrastiveConfig, data["contrastive"], "contrastive")
    if "augmentation" in data:
        kwargs["augmentation"] = _dataclass_from(AugmentationConfig, data["augmentation"], "augmentation")
    if "optimizer" in data:
        _keys(data["optimizer"], {"pretrain", "finetune"}, "optimizer")
        if "pretrain" in data["optimizer"]:
            kwargs["pretrain_optimizer"] = _dataclass_from(OptimizerConfig, data["optimizer"]["pretrain"],
                                                           "optimizer.pretrain")
        if "finetune" in data["optimizer"]:
            ft = {"epochs": 100, **data["optimizer"]["finetune"]}
            kwargs["finetune_optimizer"] = _dataclass_from(OptimizerConfig, ft, "optimizer.finetune")
    if "downstream" in data:
        _keys(data["downstream"], {"finetune_backbone"}, "downstream")
        kwargs["finetune_backbone"] = bool(data["downstream"].get("finetune_backbone", True))
    if "grid" in data:
        kwargs["grid"] = _grid(data["grid"], "grid")
    if "output_dir" in data:
        kwargs["output_dir"] = str(data["output_dir"])
    return ExperimentConfig(**kwargs)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def save_config(config: ExperimentConfig, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
