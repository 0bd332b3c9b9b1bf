"""Per-modality encoder networks.

Two desk-scale backbones are available: an MLP (flatten, hidden dense layers,
linear output) and a SmallCNN (conv+relu+avgpool stages, then a dense layer).
Each modality gets its own parameters, namespaced ``"<modality>/<layer>/<W|b>"``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ConfigError, ContractError, DimensionError

MLP = "MLP"
SMALL_CNN = "SmallCNN"


@dataclass(frozen=True)
class ModalitySpec:
    modality_id: int
    name: str
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for attr in ("channels", "height", "width"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"modality {self.name}: {attr} must be positive")

    @property
    def shape(self):
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class ProjectionHead:
    enabled: bool = False
    hidden: int = 64
    out: int = 32


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of one modality's backbone.

    ``hidden`` lists dense widths for the MLP; ``conv_stages`` lists
    ``(out_channels, kernel_size, stride)`` triples for the SmallCNN, each
    followed by relu and 2x2 average pooling.
    """

    kind: str = MLP
    hidden: tuple = (64, 64)
    conv_stages: tuple = ((8, 2, 2), (16, 3, 1))
    output_dim: int = 32
    projection: ProjectionHead = field(default_factory=ProjectionHead)

    def __post_init__(self):
        if self.kind not in (MLP, SMALL_CNN):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.output_dim < 1:
            raise ConfigError("output_dim must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        stages = tuple(tuple(int(v) for v in st) + ((1,) if len(st) == 2 else ()) for st in self.conv_stages)
        if any(len(st) != 3 or min(st) < 1 for st in stages):
            raise ConfigError(f"conv stages must be positive (out_channels, kernel, stride), got {self.conv_stages}")
        object.__setattr__(self, "conv_stages", stages)
        if isinstance(self.projection, dict):
            object.__setattr__(self, "projection", ProjectionHead(**self.projection))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["conv_stages"] = [list(s) for s in self.conv_stages]
        return d


def default_modalities():
    """S1-like and S2-like 2x16x16 plus a higher-resolution NAIP-like 4x32x32."""
    return [
        ModalitySpec(0, "S1", 2, 16, 16),
        ModalitySpec(1, "S2", 2, 16, 16),
        ModalitySpec(2, "NAIP", 4, 32, 32),
    ]


def default_encoder_spec(modality: ModalitySpec) -> EncoderSpec:
    # the high-resolution modality gets the convolutional backbone
    if modality.height >= 32 and modality.width >= 32:
        return EncoderSpec(kind=SMALL_CNN)
    return EncoderSpec(kind=MLP)


def _layer_shapes(spec: EncoderSpec, modality: ModalitySpec):
    """Yield (layer name, weight shape, fan_in, fan_out) for the backbone and head."""
    c, h, w = modality.shape
    if spec.kind == MLP:
        width = c * h * w
        for i, size in enumerate(spec.hidden):
            yield f"dense{i}", (width, size), width, size
            width = size
        yield "out", (width, spec.output_dim), width, spec.output_dim
    else:
        for i, (out_c, k, stride) in enumerate(spec.conv_stages):
            if k > h or k > w:
                raise ConfigError(f"{modality.name}: conv stage {i} kernel {k} exceeds {h}x{w} input")
            h, w = (h - k) // stride + 1, (w - k) // stride + 1
            if h % 2 or w % 2:
                raise ConfigError(
                    f"{modality.name}: conv stage {i} output {h}x{w} is odd and cannot be pooled")
            yield f"conv{i}", (out_c, c, k, k), c * k * k, out_c * k * k
            c, h, w = out_c, h // 2, w // 2
        width = c * h * w
        yield "out", (width, spec.output_dim), width, spec.output_dim
    if spec.projection.enabled:
        yield "proj0", (spec.output_dim, spec.projection.hidden), spec.output_dim, spec.projection.hidden
        yield "proj1", (spec.projection.hidden, spec.projection.out), spec.projection.hidden, spec.projection.out


def init_encoder(spec: EncoderSpec, modality: ModalitySpec, seed: int, prefix=None) -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    prefix = modality.name if prefix is None else prefix
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for layer, shape, fan_in, fan_out in _layer_shapes(spec, modality):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params.add(f"{prefix}/{layer}/W", rng.uniform(-a, a, size=shape))
        bias_len = shape[0] if layer.startswith("conv") else shape[1]
        params.add(f"{prefix}/{layer}/b", np.zeros(bias_len))
    return params


class EncoderBundle:
    """One (spec, params) pair per modality, keyed by modality id."""

    def __init__(self, modalities, specs, params):
        self.modalities = {m.modality_id: m for m in modalities}
        self.specs = dict(specs)
        self.params = dict(params)
        if set(self.specs) != set(self.modalities) or set(self.params) != set(self.modalities):
            raise ContractError("bundle needs a spec and params for exactly its modalities")

    @classmethod
    def initialize(cls, modalities, specs, seed):
        from .seeding import substream

        params = {m.modality_id: init_encoder(specs[m.modality_id], m, substream(seed, "init", m.name))
                  for m in modalities}
        return cls(modalities, specs, params)

    @property
    def modality_ids(self):
        return sorted(self.modalities)

    def names(self):
        return [self.modalities[i].name for i in self.modality_ids]

    def all_params(self) -> ParamSet:
        merged = ParamSet()
        for mid in self.modality_ids:
            for name, t in self.params[mid].items():
                merged[name] = t
        return merged

    def subset(self, modality_ids, drop_projection=False):
        """Bundle restricted to ``modality_ids`` with copied parameters."""
        missing = set(modality_ids) - set(self.modalities)
        if missing:
            names = sorted(str(m) for m in missing)
            raise ConfigError(f"modalities {names} are not in this bundle")
        mods = [self.modalities[i] for i in sorted(modality_ids)]
        specs, params = {}, {}
        for m in mods:
            spec = self.specs[m.modality_id]
            p = self.params[m.modality_id].copy()
            if drop_projection and spec.projection.enabled:
                for name in [n for n in p if "/proj" in n]:
                    del p[name]
                spec = EncoderSpec(spec.kind, spec.hidden, spec.conv_stages, spec.output_dim, ProjectionHead())
            specs[m.modality_id] = spec
            params[m.modality_id] = p
        return EncoderBundle(mods, specs, params)

    def _lookup(self, modality_id):
        if modality_id not in self.modalities:
            raise ContractError(f"unknown modality id {modality_id}")
        return self.modalities[modality_id], self.specs[modality_id], self.params[modality_id]

    def encode(self, modality_id, image):
        return encode(self, modality_id, image)

    def to_dict(self):
        return {
            "modalities": [asdict(self.modalities[i]) for i in self.modality_ids],
            "specs": {self.modalities[i].name: self.specs[i].to_dict() for i in self.modality_ids},
            "params": self.all_params().to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        mods = [ModalitySpec(**m) for m in data["modalities"]]
        allp = ParamSet.from_dict(data["params"])
        specs, params = {}, {}
        for m in mods:
            s = dict(data["specs"][m.name])
            s["projection"] = ProjectionHead(**s["projection"])
            specs[m.modality_id] = EncoderSpec(**s)
            p = ParamSet()
            for name, t in allp.items():
                if name.split("/", 1)[0] == m.name:
                    p[name] = t
            params[m.modality_id] = p
        return cls(mods, specs, params)


def _p(params, prefix, layer):
    return params[f"{prefix}/{layer}/W"], params[f"{prefix}/{layer}/b"]


def encode(bundle: EncoderBundle, modality_id, image):
    """Backbone representation (before any projection head).

    ``image`` is (c, h, w) giving an (output_dim,) vector, or a batch
    (n, c, h, w) giving (n, output_dim).
    """
    modality, spec, params = bundle._lookup(modality_id)
    x = ad.as_tensor(image)
    single = x.values.ndim == 3
    if x.shape[-3:] != modality.shape or x.values.ndim not in (3, 4):
        raise DimensionError(f"{modality.name}: expected images of shape {modality.shape}, got {x.shape}")
    if single:
        x = ad.reshape(x, (1,) + modality.shape)
    prefix = modality.name
    if spec.kind == MLP:
        h = ad.flatten(x)
        for i in range(len(spec.hidden)):
            h = ad.relu(ad.dense(h, *_p(params, prefix, f"dense{i}")))
    else:
        h = x
        for i in range(len(spec.conv_stages)):
            w, b = _p(params, prefix, f"conv{i}")
            h = ad.conv2d(h, w, spec.conv_stages[i][2])
            h = ad.add(h, ad.reshape(b, (-1, 1, 1)))
            h = ad.avgpool2(ad.relu(h))
        h = ad.flatten(h)
    out = ad.dense(h, *_p(params, prefix, "out"))
    if single:
        out = ad.reshape(out, (spec.output_dim,))
    return out


def project(bundle: EncoderBundle, modality_id, representation):
    """Projection-head output, or the representation itself when the head is off."""
    modality, spec, params = bundle._lookup(modality_id)
    if not spec.projection.enabled:
        return ad.as_tensor(representation)
    h = ad.relu(ad.dense(representation, *_p(params, modality.name, "proj0")))
    return ad.dense(h, *_p(params, modality.name, "proj1"))


def embed(bundle: EncoderBundle, modality_id, image):
    """Unit-norm embedding fed to the contrastive loss."""
    return ad.l2_normalize(project(bundle, modality_id, encode(bundle, modality_id, image)))
