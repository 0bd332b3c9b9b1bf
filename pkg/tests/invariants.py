"""Invariant checks shared by the property tests and the acceptance run."""

import numpy as np

from cmssl.contrastive import ContrastiveConfig, ViewRecord, batch_loss, build_positive_index
from cmssl.downstream import fuse
from cmssl.views import AugmentationConfig, augment

import oracles

IDENTITY_AUG = AugmentationConfig(flip_h_prob=0.0, flip_v_prob=0.0, crop_scale_min=1.0, crop_scale_max=1.0)


def random_batch(rng, max_views=8, dim=None):
    """Views over 2-4 samples; some samples negative-class; unit-norm random embeddings."""
    n = int(rng.integers(2, max_views + 1))
    n_samples = int(rng.integers(2, min(n, 4) + 1))
    sids = np.concatenate([np.arange(n_samples), rng.integers(0, n_samples, n - n_samples)])
    rng.shuffle(sids)
    negative = {s for s in range(n_samples) if rng.random() < 0.3}
    dim = dim or int(rng.integers(2, 6))
    emb = rng.standard_normal((n, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    mods = rng.integers(0, 3, n)
    return [ViewRecord(i * 3 + 1, int(sids[i]), int(mods[i]), bool(rng.random() < 0.5), int(sids[i]) in negative,
                       emb[i]) for i in range(n)]


def has_contributor(batch):
    idx = build_positive_index(batch)
    return bool(idx.contributing)


def check_index(batch):
    idx = build_positive_index(batch)
    by_id = {r.view_id: r for r in batch}
    for v, r in by_id.items():
        assert v not in idx.omega[v]
        assert idx.positives[v] <= idx.omega[v]
        assert idx.omega[v] == set(by_id) - {v}
        for p in idx.positives[v]:
            assert v in idx.positives[p]
            assert by_id[p].sample_id == r.sample_id
        assert idx.contributes_loss[v] == (not r.is_negative_class and bool(idx.positives[v]))


def check_permutation(batch, rng, tau):
    cfg = ContrastiveConfig(temperature=tau)
    base = batch_loss(batch, build_positive_index(batch), cfg).item()
    perm = [batch[i] for i in rng.permutation(len(batch))]
    moved = batch_loss(perm, build_positive_index(perm), cfg).item()
    assert abs(base - moved) <= 1e-12, (base, moved)


def check_against_oracle(batch, tau, **cfg_kw):
    cfg = ContrastiveConfig(temperature=tau, **cfg_kw)
    got = batch_loss(batch, build_positive_index(batch), cfg).item()
    kw = {"literal": cfg.literal_eq1, "aggregate": cfg.positive_aggregation}
    want = oracles.batch_loss([r.embedding.tolist() for r in batch], [r.sample_id for r in batch],
                              [r.is_negative_class for r in batch], tau, **kw)
    assert abs(got - want) <= 1e-9, (got, want)
    return got, want


def check_identity_augmentation(rng):
    c, h, w = int(rng.integers(1, 5)), int(rng.integers(4, 20)), int(rng.integers(4, 20))
    img = rng.standard_normal((c, h, w))
    out = augment(img, IDENTITY_AUG, rng)
    assert out.shape == img.shape and out.tobytes() == img.tobytes()


def check_fuse_additivity(rng):
    k = int(rng.integers(1, 6))
    ids = rng.permutation(10)[:k]
    parts = [(int(i), rng.standard_normal(int(rng.integers(1, 40)))) for i in ids]
    out = fuse(parts).values
    assert out.shape == (sum(len(v) for _, v in parts),)
    expected = np.concatenate([v for _, v in sorted(parts, key=lambda p: p[0])])
    assert out.tobytes() == expected.tobytes()
