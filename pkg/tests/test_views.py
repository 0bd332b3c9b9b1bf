import json
import os
import struct

import numpy as np
import pytest

from cmssl.errors import ConfigError, ContractError, DatasetLoadError, FormatError
from cmssl.views import (CLASS_NAMES, NEGATIVE, AugmentationConfig, Sample, SynthSpec, augment, bilinear_resize,
                         generate_synthetic, latent_prototypes, load_raw_dataset, make_views, random_flip,
                         random_resized_crop, read_raw, write_dataset, write_raw)

import oracles

# frozen output of oracles.bilinear_resize on the 6x6 pattern (3r + 5c) mod 7, resized to 8x8
RESIZE_ROW0 = [0.0, 3.125, 4.25, 2.75, 1.25, 4.125, 5.25, 4.0]
RESIZE_ROW3 = [5.5, 4.25, 3.078125, 2.125, 0.625, 2.953125, 4.078125, 3.375]
RESIZE_TOTAL = 197.296875


def pattern6():
    return np.array([[float((3 * r + 5 * c) % 7) for c in range(6)] for r in range(6)])


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y):
    classes = np.unique(train_y)
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(classes[np.argmin(d, axis=1)] == test_y))


def pixel_oracle(ds, modality_id):
    labeled = ds.labeled()
    train = [s for s in labeled if s.sample_id % 5]
    test = [s for s in labeled if s.sample_id % 5 == 0]
    flat = lambda ss: np.stack([s.images[modality_id].ravel() for s in ss])
    lab = lambda ss: np.array([s.class_label for s in ss])
    return nearest_centroid_accuracy(flat(train), lab(train), flat(test), lab(test))


class TestFlip:
    def test_involution(self):
        img = np.random.default_rng(0).standard_normal((2, 5, 7))
        once = random_flip(img, True, np.random.default_rng(1), prob=1.0)
        assert not np.array_equal(once, img)
        assert np.array_equal(random_flip(once, True, np.random.default_rng(1), prob=1.0), img)
        v = random_flip(random_flip(img, False, np.random.default_rng(0), 1.0), False, np.random.default_rng(0), 1.0)
        assert np.array_equal(v, img)

    def test_prob_zero_identity(self):
        img = np.arange(12.0).reshape(1, 3, 4)
        rng = np.random.default_rng(2)
        assert all(random_flip(img, h, rng, prob=0.0) is img for h in (True, False) for _ in range(20))

    def test_deterministic(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        runs = [[random_flip(img, True, r, 0.5)[0, 0, 0] for _ in range(30)]
                for r in (np.random.default_rng(3), np.random.default_rng(3))]
        assert runs[0] == runs[1]


class TestCrop:
    def test_full_scale_identity(self):
        img = np.random.default_rng(4).standard_normal((3, 9, 11))
        out = random_resized_crop(img, 1.0, 1.0, np.random.default_rng(5))
        assert out.tobytes() == img.tobytes()

    def test_constant_preserved(self):
        img = np.full((2, 16, 16), -1.25)
        for seed in range(10):
            out = random_resized_crop(img, 0.5, 0.95, np.random.default_rng(seed))
            assert np.all(out == -1.25)

    def test_shape_preserved(self):
        img = np.random.default_rng(6).standard_normal((4, 32, 32))
        assert random_resized_crop(img, 0.9, 1.0, np.random.default_rng(0)).shape == img.shape

    def test_resize_oracle_frozen(self):
        out = bilinear_resize(pattern6()[None], 8, 8)[0]
        assert out[0].tolist() == RESIZE_ROW0
        assert out[3].tolist() == RESIZE_ROW3
        assert abs(out.sum() - RESIZE_TOTAL) <= 1e-12

    def test_crop_matches_independent_resize_8x8(self):
        img = np.random.default_rng(7).standard_normal((1, 8, 8))
        a = random_resized_crop(img, 0.5, 0.8, np.random.default_rng(42))
        b = random_resized_crop(img, 0.5, 0.8, np.random.default_rng(42))
        assert a.tobytes() == b.tobytes()
        # replay the same draws to find the window, then resize it with the plain-loop oracle
        rng = np.random.default_rng(42)
        side = np.sqrt(rng.uniform(0.5, 0.8))
        ch = cw = int(round(8 * side))
        top, left = rng.integers(0, 8 - ch + 1), rng.integers(0, 8 - cw + 1)
        window = img[0, top:top + ch, left:left + cw].tolist()
        expected = np.array(oracles.bilinear_resize(window, 8, 8))
        assert ch < 8
        assert np.max(np.abs(a[0] - expected)) <= 1e-12

    def test_too_small(self):
        with pytest.raises(ContractError):
            random_resized_crop(np.zeros((1, 3, 3)), 0.9, 1.0, np.random.default_rng(0))


class TestAugmentConfig:
    def test_identity_config_bitwise(self):
        cfg = AugmentationConfig(flip_h_prob=0, flip_v_prob=0, crop_scale_min=1, crop_scale_max=1)
        img = np.random.default_rng(8).standard_normal((2, 16, 16))
        assert augment(img, cfg, np.random.default_rng(0)).tobytes() == img.tobytes()

    @pytest.mark.parametrize("kw", [{"crop_scale_min": 0.0}, {"crop_scale_min": 0.95, "crop_scale_max": 0.9},
                                    {"crop_scale_max": 1.1}, {"flip_h_prob": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            AugmentationConfig(**kw)


class TestMakeViews:
    def sample(self, negative=False):
        rng = np.random.default_rng(9)
        imgs = {0: rng.standard_normal((2, 16, 16)), 1: rng.standard_normal((2, 16, 16)),
                2: rng.standard_normal((4, 32, 32))}
        return Sample(3, NEGATIVE if negative else 1, imgs)

    def test_three_modalities_six_views(self):
        views = make_views(self.sample(), [0, 1, 2], AugmentationConfig(), np.random.default_rng(0))
        assert len(views) == 6
        assert [r.modality_id for r, _ in views] == [0, 0, 1, 1, 2, 2]
        assert all(r.augmented and r.sample_id == 3 for r, _ in views)
        assert [r.view_id for r, _ in views] == list(range(6))

    def test_star_two_modalities(self):
        s = self.sample()
        views = make_views(s, [2, 0], AugmentationConfig(enabled=False), np.random.default_rng(0))
        assert len(views) == 2 and not any(r.augmented for r, _ in views)
        assert views[0][1] is s.images[0]

    def test_star_single_modality(self):
        with pytest.raises(ConfigError, match="single modality"):
            make_views(self.sample(), [1], AugmentationConfig(enabled=False), np.random.default_rng(0))

    def test_negative_flag(self):
        views = make_views(self.sample(True), [0, 1], AugmentationConfig(), np.random.default_rng(0))
        assert all(r.is_negative_class for r, _ in views)

    def test_missing_modality(self):
        s = self.sample()
        del s.images[2]
        with pytest.raises(ContractError):
            make_views(s, [0, 2], AugmentationConfig(), np.random.default_rng(0))


class TestSynthetic:
    def test_zero_noise_same_class_identical(self):
        spec = SynthSpec(samples_per_class=3, sigma_within=0.0, noise_std={})
        ds = generate_synthetic(spec, 1)
        a, b = [s for s in ds.samples if s.class_label == 2][:2]
        for m in ds.modalities:
            assert a.images[m.modality_id].tobytes() == b.images[m.modality_id].tobytes()

    def test_deterministic_bytes(self):
        spec = SynthSpec(samples_per_class=4)
        a, b = generate_synthetic(spec, 7), generate_synthetic(spec, 7)
        for s, t in zip(a.samples, b.samples):
            assert s.class_label == t.class_label
            assert all(s.images[k].tobytes() == t.images[k].tobytes() for k in s.images)

    def test_default_shape(self, default_dataset):
        assert len(default_dataset) == 600
        counts = default_dataset.class_counts()
        assert counts["Negative"] == 150
        assert all(counts[n] == 75 for n in CLASS_NAMES)
        assert [m.shape for m in default_dataset.modalities] == [(2, 16, 16), (2, 16, 16), (4, 32, 32)]

    def test_nonlinear_modality_nonnegative_without_noise(self):
        ds = generate_synthetic(SynthSpec(samples_per_class=2, noise_std={}), 0)
        assert all(np.all(s.images[0] >= 0) for s in ds.samples)
        assert any(np.any(s.images[1] < 0) for s in ds.samples)

    def test_latent_nearest_prototype_is_perfect(self, default_dataset):
        protos = latent_prototypes(SynthSpec(), 0)
        labeled = default_dataset.labeled()
        z = np.stack([s.latent for s in labeled])
        pred = np.argmin(((z[:, None] - protos[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == [s.class_label for s in labeled]) == 1.0

    def test_pixel_nearest_centroid_above_chance(self, default_dataset):
        assert pixel_oracle(default_dataset, 0) > 0.40

    def test_noise_monotone(self):
        accs = []
        for noise in (1.0, 4.0, 12.0):
            spec = SynthSpec(noise_std={"S1": noise, "S2": noise, "NAIP": noise})
            accs.append(pixel_oracle(generate_synthetic(spec, 0), 1))
        assert accs[0] > accs[1] > accs[2]

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            SynthSpec(noise_std={"S1": -1.0})
        with pytest.raises(ConfigError):
            SynthSpec(noise_std={"SAR": 1.0})


class TestRawFormat:
    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.cmrw"
        write_raw(path, np.array([[[1.0, -2.0]]]))
        blob = path.read_bytes()
        assert blob[:4] == b"CMRW"
        assert struct.unpack("<III", blob[4:16]) == (1, 1, 2)
        assert blob[16:].hex() == "0000803f000000c0"

    def test_roundtrip(self, small_dataset, tmp_path):
        manifest = write_dataset(small_dataset, tmp_path, metadata={"note": 1})
        back = load_raw_dataset(manifest)
        assert json.load(open(manifest))["metadata"] == {"note": 1}
        assert [m.shape for m in back.modalities] == [m.shape for m in small_dataset.modalities]
        for s, t in zip(small_dataset.samples, back.samples):
            assert (s.sample_id, s.class_label) == (t.sample_id, t.class_label)
            for k in s.images:
                np.testing.assert_array_equal(t.images[k], s.images[k].astype(np.float32).astype(np.float64))

    def test_missing_file(self, small_dataset, tmp_path):
        manifest = write_dataset(small_dataset, tmp_path)
        victim = tmp_path / "tiles" / "000003_S2.cmrw"
        os.remove(victim)
        with pytest.raises(DatasetLoadError, match="000003_S2.cmrw"):
            load_raw_dataset(manifest)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.cmrw"
        path.write_bytes(b"XXXX" + struct.pack("<III", 1, 1, 1) + b"\0\0\0\0")
        with pytest.raises(FormatError, match="magic"):
            read_raw(path)

    def test_shape_mismatch_vs_manifest(self, small_dataset, tmp_path):
        manifest = write_dataset(small_dataset, tmp_path)
        write_raw(tmp_path / "tiles" / "000000_S1.cmrw", np.zeros((2, 8, 8)))
        with pytest.raises(FormatError, match="does not match"):
            load_raw_dataset(manifest)

    def test_unknown_class(self, small_dataset, tmp_path):
        manifest = write_dataset(small_dataset, tmp_path)
        data = json.load(open(manifest))
        data["samples"][0]["label"] = "Volcano"
        json.dump(data, open(manifest, "w"))
        with pytest.raises(FormatError, match="Volcano"):
            load_raw_dataset(manifest)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.cmrw"
        path.write_bytes(b"CMRW" + struct.pack("<III", 1, 2, 2) + b"\0" * 8)
        with pytest.raises(FormatError):
            read_raw(path)
