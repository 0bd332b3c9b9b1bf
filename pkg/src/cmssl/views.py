"""View generation, synthetic multi-modal data, and raw tensor file IO."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .contrastive import ViewRecord
from .encoders import ModalitySpec, default_modalities
from .errors import ConfigError, ContractError, DatasetLoadError, FormatError
from .seeding import rng_for

NEGATIVE = -1
CLASS_NAMES = ("CAFOs", "Landfills", "CoalMines", "ProcPlants", "R&Ts", "WWTPs")
NEGATIVE_NAME = "Negative"

RAW_MAGIC = b"CMRW"
RAW_HEADER = struct.Struct("<4sIII")


@dataclass
class Sample:
    sample_id: int
    class_label: int
    images: dict
    latent: np.ndarray | None = None

    @property
    def is_negative(self):
        return self.class_label == NEGATIVE


@dataclass
class Dataset:
    modalities: list
    samples: list

    def __len__(self):
        return len(self.samples)

    def modality(self, name_or_id):
        for m in self.modalities:
            if name_or_id in (m.name, m.modality_id):
                return m
        raise ConfigError(f"unknown modality {name_or_id!r}; have {[m.name for m in self.modalities]}")

    def modality_ids(self, names):
        return sorted(self.modality(n).modality_id for n in names)

    def labeled(self):
        return [s for s in self.samples if not s.is_negative]

    def class_counts(self):
        counts = {}
        for s in self.samples:
            key = NEGATIVE_NAME if s.is_negative else CLASS_NAMES[s.class_label]
            counts[key] = counts.get(key, 0) + 1
        return counts

    def stack(self, samples, modality_id):
        return np.stack([s.images[modality_id] for s in samples])


# ---------------------------------------------------------------------------
# augmentations


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    crop_scale_min: float = 0.9
    crop_scale_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1:
            raise ConfigError("need 0 < crop_scale_min <= crop_scale_max <= 1")
        for p in (self.flip_h_prob, self.flip_v_prob):
            if not 0 <= p <= 1:
                raise ConfigError(f"flip probability {p} outside [0, 1]")

    @property
    def views_per_modality(self):
        return 2 if self.enabled else 1


def random_flip(image, horizontal, rng, prob=0.5):
    """Reverse the width (horizontal) or height axis with probability ``prob``."""
    image = np.asarray(image)
    if rng.random() < prob:
        return np.flip(image, axis=-1 if horizontal else -2).copy()
    return image


def bilinear_resize(image, out_h, out_w):
    """Half-pixel-centre bilinear resize of a (c, h, w) array, edges clamped."""
    _, h, w = image.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def random_resized_crop(image, scale_min, scale_max, rng):
    """Crop an area fraction in [scale_min, scale_max] (aspect kept) and resize back."""
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if h < 4 or w < 4:
        raise ContractError(f"random_resized_crop needs at least 4x4, got {h}x{w}")
    s = rng.uniform(scale_min, scale_max)
    side = np.sqrt(s)
    ch = min(h, int(round(h * side)))
    cw = min(w, int(round(w * side)))
    if ch < 1 or cw < 1:
        raise ContractError("crop smaller than one pixel")
    top = rng.integers(0, h - ch + 1)
    left = rng.integers(0, w - cw + 1)
    crop = image[:, top:top + ch, left:left + cw]
    if (ch, cw) == (h, w):
        return crop.copy()
    return bilinear_resize(crop, h, w)


def augment(image, aug: AugmentationConfig, rng):
    image = random_flip(image, True, rng, aug.flip_h_prob)
    image = random_flip(image, False, rng, aug.flip_v_prob)
    return random_resized_crop(image, aug.crop_scale_min, aug.crop_scale_max, rng)


def make_views(sample: Sample, modality_ids, aug: AugmentationConfig, rng, first_view_id=0):
    """Views of one sample as ``(ViewRecord, image)`` pairs.

    With augmentation: two independently augmented views per modality.
    Without: the single original image per modality, so positives exist only
    across modalities, which needs at least two modalities.
    """
    modality_ids = sorted(modality_ids)
    missing = set(modality_ids) - set(sample.images)
    if missing:
        raise ContractError(f"sample {sample.sample_id} lacks modalities {sorted(missing)}")
    if not aug.enabled and len(modality_ids) < 2:
        raise ConfigError("pre-training without augmentations cannot be done on a single modality: "
                          "a lone unaugmented view has no positive")
    out = []
    vid = first_view_id
    for mid in modality_ids:
        for _ in range(aug.views_per_modality):
            img = augment(sample.images[mid], aug, rng) if aug.enabled else sample.images[mid]
            rec = ViewRecord(view_id=vid, sample_id=sample.sample_id, modality_id=mid,
                             augmented=aug.enabled, is_negative_class=sample.is_negative)
            out.append((rec, img))
            vid += 1
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Latent-factor generator: each modality renders a shared class-driven latent.

    Renderings are smooth random spatial patterns (one per latent dim and
    channel) so that flips and mild crops keep images meaningful.  With
    ``random_orientation`` (off by default) each scene gets a random h/v flip shared by
    all of its modalities.
    """

    num_classes: int = 6
    latent_dim: int = 16
    samples_per_class: int = 75
    negative_fraction: float = 0.25
    negative_prototypes: int = 12
    class_scale: float = 0.8
    sigma_within: float = 0.5
    noise_std: dict = field(default_factory=lambda: {"S1": 3.0, "S2": 6.0, "NAIP": 12.0})
    nonlinear_modalities: tuple = ("S1",)
    random_orientation: bool = False
    pattern_resolution: int = 8
    modalities: list = field(default_factory=default_modalities)

    def __post_init__(self):
        if not 0 <= self.negative_fraction < 1:
            raise ConfigError("negative_fraction must be in [0, 1)")
        if any(v < 0 for v in self.noise_std.values()):
            raise ConfigError("noise_std must be >= 0")
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities]
        self.nonlinear_modalities = tuple(self.nonlinear_modalities)
        names = {m.name for m in self.modalities}
        unknown = (set(self.noise_std) | set(self.nonlinear_modalities)) - names
        if unknown:
            raise ConfigError(f"synthetic spec names unknown modalities {sorted(unknown)}")
        if [m.modality_id for m in self.modalities] != list(range(len(self.modalities))):
            raise ConfigError("modality ids must be 0..K-1 in order")


def _render_map(m: ModalitySpec, latent_dim, res, rng):
    """Fixed linear map latent -> (c, h, w) built from upsampled random grids."""
    grids = rng.standard_normal((latent_dim * m.channels, min(res, m.height), min(res, m.width)))
    up = np.stack([bilinear_resize(g[None], m.height, m.width)[0] for g in grids])
    up /= up.reshape(len(up), -1).std(axis=1)[:, None, None]
    return up.reshape(latent_dim, m.channels * m.height * m.width) / np.sqrt(latent_dim)


def _orient(image, flips):
    if flips[0]:
        image = image[:, :, ::-1]
    if flips[1]:
        image = image[:, ::-1, :]
    return image


def generate_synthetic(spec: SynthSpec, seed) -> Dataset:
    rng = rng_for(seed, "synthetic", "structure")
    protos = rng.standard_normal((spec.num_classes, spec.latent_dim)) * spec.class_scale
    neg_protos = rng.standard_normal((spec.negative_prototypes, spec.latent_dim)) * spec.class_scale * 1.5
    maps = {m.modality_id: _render_map(m, spec.latent_dim, spec.pattern_resolution, rng) for m in spec.modalities}

    n_labeled = spec.num_classes * spec.samples_per_class
    n_neg = int(round(n_labeled * spec.negative_fraction / (1 - spec.negative_fraction)))
    labels = [c for c in range(spec.num_classes) for _ in range(spec.samples_per_class)] + [NEGATIVE] * n_neg

    samples = []
    for sid, label in enumerate(labels):
        srng = rng_for(seed, "synthetic", "sample", sid)
        if label == NEGATIVE:
            center = neg_protos[srng.integers(spec.negative_prototypes)]
        else:
            center = protos[label]
        z = center + spec.sigma_within * srng.standard_normal(spec.latent_dim)
        flips = srng.random(2) < 0.5 if spec.random_orientation else (False, False)
        images = {}
        for m in spec.modalities:
            flat = _orient((z @ maps[m.modality_id]).reshape(m.shape), flips).ravel()
            if m.name in spec.nonlinear_modalities:
                flat = np.abs(flat)
            flat = flat + spec.noise_std.get(m.name, 0.0) * srng.standard_normal(flat.shape)
            images[m.modality_id] = flat.reshape(m.shape)
        samples.append(Sample(sid, label, images, latent=z))
    return Dataset(list(spec.modalities), samples)


def latent_prototypes(spec: SynthSpec, seed):
    rng = rng_for(seed, "synthetic", "structure")
    return rng.standard_normal((spec.num_classes, spec.latent_dim)) * spec.class_scale


# ---------------------------------------------------------------------------
# raw files


def write_raw(path, image):
    image = np.asarray(image)
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(RAW_MAGIC, c, h, w))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_raw(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DatasetLoadError(f"cannot read raw tensor file {path}: {exc.strerror}") from exc
    if len(blob) < RAW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, c, h, w = RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
    payload = blob[RAW_HEADER.size:]
    if len(payload) != 4 * c * h * w:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header says {c}x{h}x{w} float32")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float64)


def write_dataset(dataset: Dataset, out_dir, metadata=None):
    """Write a manifest plus one CMRW file per (sample, modality); returns the manifest path.

    ``metadata`` is stored verbatim under the manifest's ``metadata`` key.
    """
    os.makedirs(os.path.join(out_dir, "tiles"), exist_ok=True)
    entries = []
    for s in dataset.samples:
        files = {}
        for m in dataset.modalities:
            rel = os.path.join("tiles", f"{s.sample_id:06d}_{m.name}.cmrw")
            write_raw(os.path.join(out_dir, rel), s.images[m.modality_id])
            files[m.name] = rel
        label = NEGATIVE_NAME if s.is_negative else CLASS_NAMES[s.class_label]
        entries.append({"sample_id": s.sample_id, "label": label, "files": files})
    manifest = {
        "format_version": 1,
        "modalities": [{"modality_id": m.modality_id, "name": m.name, "channels": m.channels,
                        "height": m.height, "width": m.width} for m in dataset.modalities],
        "samples": entries,
    }
    if metadata is not None:
        manifest["metadata"] = metadata
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_raw_dataset(manifest_path) -> Dataset:
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DatasetLoadError(f"cannot read manifest {manifest_path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != 1:
        raise FormatError(f"{manifest_path}: unsupported format_version")
    base = os.path.dirname(os.path.abspath(manifest_path))
    modalities = [ModalitySpec(**m) for m in manifest["modalities"]]
    samples = []
    for entry in manifest["samples"]:
        label = entry["label"]
        if label == NEGATIVE_NAME:
            cls = NEGATIVE
        elif label in CLASS_NAMES:
            cls = CLASS_NAMES.index(label)
        else:
            raise FormatError(f"sample {entry['sample_id']}: unknown class {label!r}")
        images = {}
        for m in modalities:
            if m.name not in entry["files"]:
                raise FormatError(f"sample {entry['sample_id']}: no file for modality {m.name}")
            path = os.path.join(base, entry["files"][m.name])
            if not os.path.exists(path):
                raise DatasetLoadError(f"missing modality file {path}")
            img = read_raw(path)
            if img.shape != m.shape:
                raise FormatError(f"{path}: shape {img.shape} does not match manifest {m.shape}")
            images[m.modality_id] = img
        samples.append(Sample(int(entry["sample_id"]), cls, images))
    return Dataset(modalities, samples)
