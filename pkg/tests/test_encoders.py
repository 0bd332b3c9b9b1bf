import numpy as np
import pytest

from cmssl import autodiff as ad
from cmssl.autodiff import Graph
from cmssl.contrastive import ContrastiveConfig, ViewRecord, batch_loss, build_positive_index
from cmssl.encoders import (EncoderBundle, EncoderSpec, ModalitySpec, ProjectionHead, default_encoder_spec,
                            default_modalities, embed, encode, init_encoder, project)
from cmssl.errors import ConfigError, ContractError, DimensionError

# hand evaluation of relu(x W1 + b1) W2 + b2 for x = [1, -1]
TINY_W1 = [[1.0, -1.0, 0.5], [2.0, 0.0, -1.0]]
TINY_B1 = [0.1, 0.2, -0.3]
TINY_W2 = [[1.0, 0.0], [-1.0, 2.0], [0.5, 0.5]]
TINY_B2 = [0.0, 1.0]
TINY_OUT = [0.6, 1.6]


def default_bundle(seed=0, projection=False):
    mods = default_modalities()
    specs = {}
    for m in mods:
        s = default_encoder_spec(m)
        if projection:
            s = EncoderSpec(s.kind, s.hidden, s.conv_stages, s.output_dim, ProjectionHead(enabled=True))
        specs[m.modality_id] = s
    return EncoderBundle.initialize(mods, specs, seed)


def test_default_assignment():
    kinds = {m.name: default_encoder_spec(m).kind for m in default_modalities()}
    assert kinds == {"S1": "MLP", "S2": "MLP", "NAIP": "SmallCNN"}


def test_init_deterministic():
    m = default_modalities()[2]
    a = init_encoder(default_encoder_spec(m), m, 5)
    b = init_encoder(default_encoder_spec(m), m, 5)
    assert list(a) == list(b)
    assert all(a[n].values.tobytes() == b[n].values.tobytes() for n in a)


def test_init_biases_zero():
    m = default_modalities()[0]
    p = init_encoder(default_encoder_spec(m), m, 1)
    biases = [n for n in p if n.endswith("/b")]
    assert biases and all(np.all(p[n].values == 0) for n in biases)


def test_init_variance_64x64():
    m = ModalitySpec(0, "X", 1, 8, 8)
    p = init_encoder(EncoderSpec(hidden=(64,), output_dim=4), m, 3)
    w = p["X/dense0/W"].values
    a2 = 6.0 / 128
    assert abs(w.var() - a2 / 3) <= 0.2 * a2 / 3
    assert np.abs(w).max() <= np.sqrt(a2)


def test_output_length(default_dataset):
    bundle = default_bundle()
    for m in default_dataset.modalities:
        img = default_dataset.samples[0].images[m.modality_id]
        assert encode(bundle, m.modality_id, img).shape == (32,)
        assert encode(bundle, m.modality_id, np.stack([img, img])).shape == (2, 32)


def test_zero_input_zero_preactivation():
    m = ModalitySpec(0, "X", 2, 3, 3)
    bundle = EncoderBundle.initialize([m], {0: EncoderSpec(hidden=(7,), output_dim=3)}, 0)
    p = bundle.params[0]
    pre = ad.dense(np.zeros((1, 18)), p["X/dense0/W"], p["X/dense0/b"])
    assert np.all(pre.values == 0)
    assert np.all(encode(bundle, 0, np.zeros((2, 3, 3))).values == 0)


def test_tiny_mlp_hand_computed():
    m = ModalitySpec(0, "T", 2, 1, 1)
    spec = EncoderSpec(hidden=(3,), output_dim=2)
    bundle = EncoderBundle.initialize([m], {0: spec}, 0)
    p = bundle.params[0]
    p["T/dense0/W"].values[:] = TINY_W1
    p["T/dense0/b"].values[:] = TINY_B1
    p["T/out/W"].values[:] = TINY_W2
    p["T/out/b"].values[:] = TINY_B2
    out = encode(bundle, 0, np.array([[[1.0]], [[-1.0]]])).values
    np.testing.assert_allclose(out, TINY_OUT, rtol=0, atol=1e-12)


def test_shape_mismatch():
    bundle = default_bundle()
    with pytest.raises(DimensionError):
        encode(bundle, 0, np.zeros((2, 8, 8)))


def test_unknown_modality():
    with pytest.raises(ContractError):
        encode(default_bundle(), 7, np.zeros((2, 16, 16)))


def test_bad_specs():
    with pytest.raises(ConfigError):
        EncoderSpec(kind="ResNet")
    with pytest.raises(ConfigError):
        init_encoder(EncoderSpec(kind="SmallCNN", conv_stages=((4, 4, 1),)), ModalitySpec(0, "Y", 1, 8, 8), 0)


def test_projection_head():
    bundle = default_bundle(projection=True)
    img = np.random.default_rng(0).standard_normal((3, 2, 16, 16))
    rep = encode(bundle, 0, img)
    assert project(bundle, 0, rep).shape == (3, 32)
    stripped = bundle.subset([0], drop_projection=True)
    assert not any("/proj" in n for n in stripped.params[0])
    assert np.array_equal(project(stripped, 0, rep).values, rep.values)


def test_embed_unit_norm():
    img = np.random.default_rng(1).standard_normal((5, 4, 32, 32))
    e = embed(default_bundle(), 2, img).values
    assert np.all(np.abs(np.linalg.norm(e, axis=1) - 1) <= 1e-12)


def test_modality_isolation():
    bundle = default_bundle()
    rng = np.random.default_rng(2)
    imgs = {m.modality_id: rng.standard_normal((2,) + m.shape) for m in default_modalities()}
    before = {i: encode(bundle, i, x).values.copy() for i, x in imgs.items()}
    for t in bundle.params[1].values():
        t.values += rng.standard_normal(t.shape)
    after = {i: encode(bundle, i, x).values for i, x in imgs.items()}
    assert before[0].tobytes() == after[0].tobytes()
    assert before[2].tobytes() == after[2].tobytes()
    assert before[1].tobytes() != after[1].tobytes()


def test_gradients_reach_every_parameter():
    bundle = default_bundle(seed=4)
    params = bundle.all_params()
    touched = {n: False for n in params}
    for b in range(5):
        rng = np.random.default_rng(100 + b)
        records, parts = [], []
        for m in default_modalities():
            x = rng.standard_normal((4,) + m.shape)
            for s in range(4):
                records.append(ViewRecord(len(records), s, m.modality_id))
            parts.append((m.modality_id, x))
        idx = build_positive_index(records)
        params.zero_grad()
        with Graph() as g:
            emb = ad.concat([embed(bundle, mid, x) for mid, x in parts], axis=0)
            loss = batch_loss(records, idx, ContrastiveConfig(), embeddings=emb)
        ad.backward(g, loss)
        for n, t in params.items():
            touched[n] |= bool(np.any(t.grad != 0))
    assert all(touched.values()), [n for n, v in touched.items() if not v]


def test_bundle_roundtrip():
    bundle = default_bundle(seed=9, projection=True)
    again = EncoderBundle.from_dict(bundle.to_dict())
    assert again.names() == bundle.names()
    a, b = bundle.all_params(), again.all_params()
    assert all(a[n].values.tobytes() == b[n].values.tobytes() for n in a)


def test_subset_unknown():
    with pytest.raises(ConfigError):
        default_bundle().subset([0, 5])
