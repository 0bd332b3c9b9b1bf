"""Finite-difference verification of every autodiff op and a composed model graph.

Each case builds a scalar from the op's output (a fixed random weighting of
the output entries), back-propagates it, and compares every input gradient
entry with a central difference.  The error measure is
``|analytic - numeric| / max(1, |analytic|)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .contrastive import ContrastiveConfig, ViewRecord, batch_loss, build_positive_index
from .encoders import EncoderBundle, EncoderSpec, ModalitySpec, embed
from .seeding import rng_for

EPS = 1e-6
TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE


def check(name, fn, inputs, rng, eps=EPS):
    """Compare analytic and central-difference gradients of ``fn(*inputs)``.

    ``inputs`` are float arrays; all of them are differentiated.  ``fn`` maps
    tensors to a tensor; a fixed random projection turns it into a scalar.
    """
    t0 = time.perf_counter()
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays]).values
    weights = rng.standard_normal(probe.shape)

    def scalar(*arrs):
        return float(np.sum(fn(*[Tensor(a) for a in arrs]).values * weights))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Graph() as g:
        loss = ad.sum_(ad.mul(fn(*leaves), weights))
    ad.backward(g, loss)

    worst, count = 0.0, 0
    for k, a in enumerate(arrays):
        analytic = leaves[k].grad
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            up = scalar(*arrays)
            a[idx] = orig - eps
            down = scalar(*arrays)
            a[idx] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
            worst = max(worst, err)
            count += 1
    return CheckResult(name, worst, count, time.perf_counter() - t0)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng):
    """(name, fn, inputs) for every differentiable op."""
    r = rng.standard_normal
    rows = np.array([2, 0, 2, 1])
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    mask[3] = False
    return [
        ("add", ad.add, [r((3, 4)), r((4,))]),
        ("sub", ad.sub, [r((3, 4)), r((3, 1))]),
        ("mul", ad.mul, [r((3, 4)), r((1, 4))]),
        ("exp", ad.exp, [r((3, 4))]),
        ("relu", ad.relu, [_away_from_zero(rng, (3, 4))]),
        ("sum", lambda x: ad.sum_(x, axis=1), [r((3, 4))]),
        ("mean", ad.mean, [r((3, 4))]),
        ("reshape", lambda x: ad.reshape(x, (6, 2)), [r((3, 4))]),
        ("flatten", ad.flatten, [r((2, 3, 2, 2))]),
        ("transpose", ad.transpose, [r((3, 4))]),
        ("concat", lambda a, b: ad.concat([a, b], axis=0), [r((2, 3)), r((1, 3))]),
        ("take_rows", lambda x: ad.take_rows(x, rows), [r((3, 4))]),
        ("matmul", ad.matmul, [r((3, 4)), r((4, 2))]),
        ("dense", ad.dense, [r((5, 4)), r((4, 3)), r((3,))]),
        ("conv2d", lambda x, k: ad.conv2d(x, k, 1), [r((2, 5, 5)), r((3, 2, 3, 3))]),
        ("conv2d_stride2_batched", lambda x, k: ad.conv2d(x, k, 2), [r((2, 2, 6, 6)), r((3, 2, 2, 2))]),
        ("avgpool2", ad.avgpool2, [r((3, 4, 4))]),
        ("l2_normalize", ad.l2_normalize, [r((4, 3))]),
        ("softmax_cross_entropy", lambda z: ad.softmax_cross_entropy(z, np.array([1, 0, 4])), [r((3, 5))]),
        ("masked_log_softmax", lambda x: ad.masked_log_softmax(x, mask), [r((4, 5))]),
    ]


def composed_case(rng):
    """Three small encoders (two MLPs and a CNN) feeding the contrastive loss.

    Returns ``(fn, inputs)`` where the inputs are every encoder parameter.
    """
    mods = [ModalitySpec(0, "S1", 2, 4, 4), ModalitySpec(1, "S2", 2, 4, 4), ModalitySpec(2, "NAIP", 2, 8, 8)]
    specs = {0: EncoderSpec(hidden=(5,), output_dim=4), 1: EncoderSpec(hidden=(5,), output_dim=4),
             2: EncoderSpec(kind="SmallCNN", conv_stages=((3, 3, 1),), output_dim=4)}
    bundle = EncoderBundle.initialize(mods, specs, int(rng.integers(2 ** 31)))
    names = [n for n, _ in bundle.all_params().sorted_items()]
    initial = [bundle.all_params()[n].values.copy() for n in names]

    # 3 samples x 3 modalities x 2 views; the last sample is negative-class
    records, images = [], {m.modality_id: [] for m in mods}
    order = {m.modality_id: [] for m in mods}
    for sid in range(3):
        for m in mods:
            for _ in range(2):
                order[m.modality_id].append(len(records))
                records.append(ViewRecord(len(records), sid, m.modality_id, True, sid == 2))
                images[m.modality_id].append(rng.standard_normal(m.shape))
    stacks = {mid: np.stack(v) for mid, v in images.items()}
    index = build_positive_index(records)
    perm = np.concatenate([order[m.modality_id] for m in mods])
    inverse = np.empty(len(perm), dtype=np.int64)
    inverse[perm] = np.arange(len(perm))
    cfg = ContrastiveConfig(temperature=0.5)

    def fn(*params):
        lookup = dict(zip(names, params))
        live = EncoderBundle(mods, specs, {
            m.modality_id: {n: lookup[n] for n in names if n.startswith(m.name + "/")}
            for m in mods})
        parts = [embed(live, m.modality_id, stacks[m.modality_id]) for m in mods]
        emb = ad.take_rows(ad.concat(parts, axis=0), inverse)
        return batch_loss(records, index, cfg, embeddings=emb)

    return fn, initial


def run_gradcheck(seed=0, ops=None, include_composed=True):
    """Run the suite; returns a list of :class:`CheckResult` (one per case)."""
    results = []
    for name, fn, inputs in op_cases(rng_for(seed, "gradcheck", "ops")):
        if ops is None or name in ops:
            results.append(check(name, fn, inputs, rng_for(seed, "gradcheck", name)))
    if include_composed:
        fn, inputs = composed_case(rng_for(seed, "gradcheck", "composed"))
        results.append(check("composed_3modality_infonce", fn, inputs, rng_for(seed, "gradcheck", "composed-w")))
    return results


def format_report(results):
    lines = [f"{'case':32s} {'max rel err':>12s} {'entries':>8s}  status"]
    for r in results:
        lines.append(f"{r.name:32s} {r.max_rel_error:12.3e} {r.n_checked:8d}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    lines.append("all gradients match" if not failed else f"FAILED: {', '.join(failed)}")
    return "\n".join(lines)
