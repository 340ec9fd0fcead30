"""Synthetic benchmark: determinism, domain structure, disk format, sampler."""

import json

import numpy as np
import pytest

from interstyle.errors import ConfigurationError
from interstyle.synth import (DatasetSpec, DomainStyle, SynthDataset,
                              generate, load_dataset, sample_batch,
                              save_dataset)


@pytest.fixture(scope="module")
def small_spec():
    return DatasetSpec(num_sources=3, ids_per_domain=6, images_per_id=5, seed=11)


@pytest.fixture(scope="module")
def small_dataset(small_spec):
    return generate(small_spec)


class TestGenerate:
    def test_deterministic_bytes(self, small_spec, tmp_path):
        a = generate(small_spec)
        b = generate(small_spec)
        for da, db in zip(a.domains, b.domains):
            np.testing.assert_array_equal(da.images, db.images)
        save_dataset(a, tmp_path / "a")
        save_dataset(b, tmp_path / "b")
        assert (tmp_path / "a" / "data.bin").read_bytes() == \
            (tmp_path / "b" / "data.bin").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == \
            (tmp_path / "b" / "manifest.json").read_bytes()

    def test_no_noise_no_jitter_identical_images(self):
        style = DomainStyle(gain=(1, 1, 1), bias=(0, 0, 0), noise_std=0.0)
        spec = DatasetSpec(num_sources=1, ids_per_domain=3, images_per_id=4,
                           jitter=0, seed=5,
                           source_styles=[style], target_style=style)
        ds = generate(spec)
        imgs = ds.sources[0].images
        for k in range(3):
            block = imgs[k * 4:(k + 1) * 4]
            for i in range(1, 4):
                np.testing.assert_array_equal(block[i], block[0])

    def test_pixels_in_unit_range(self, small_dataset):
        for d in small_dataset.domains:
            assert d.images.min() >= 0.0 and d.images.max() <= 1.0

    def test_disjoint_identity_spaces(self, small_dataset):
        seen = set()
        for d in small_dataset.domains:
            ids = set(int(i) for i in d.identity_ids)
            assert not (ids & seen)
            seen |= ids

    def test_domain_channel_separation(self):
        ds = generate(DatasetSpec())
        means = []
        for d in ds.sources:
            per_image = d.images.mean(axis=(2, 3))       # [N, 3]
            means.append(per_image)
        centers = np.array([m.mean(axis=0) for m in means])
        within = np.mean([m.std(axis=0) for m in means], axis=0)
        # distance between any two domain centers exceeds 3x the
        # within-domain std of the channel means
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                gap = np.abs(centers[i] - centers[j]).max()
                assert gap > 3.0 * within.max(), (i, j, gap, within.max())

    def test_target_outside_source_style_box(self):
        ds = generate(DatasetSpec())
        gains = np.array([d.style.gain for d in ds.sources])
        biases = np.array([d.style.bias for d in ds.sources])
        t = ds.target.style
        out_gain = np.any((t.gain < gains.min(0)) | (t.gain > gains.max(0)))
        out_bias = np.any((t.bias < biases.min(0)) | (t.bias > biases.max(0)))
        assert out_gain or out_bias

    def test_default_desk_scale(self):
        ds = generate(DatasetSpec())
        assert len(ds.sources) == 3
        assert ds.target.name == "target"
        for d in ds.domains:
            assert d.num_classes == 20
            assert d.images.shape == (400, 3, 32, 16)


class TestDiskFormat:
    def test_roundtrip(self, small_dataset, tmp_path):
        save_dataset(small_dataset, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert [d.name for d in loaded.domains] == \
            [d.name for d in small_dataset.domains]
        for da, db in zip(small_dataset.domains, loaded.domains):
            np.testing.assert_array_equal(da.images, db.images)
            np.testing.assert_array_equal(da.identity_ids, db.identity_ids)
            np.testing.assert_array_equal(da.labels, db.labels)
            assert da.style == db.style

    def test_binary_header(self, small_dataset, tmp_path):
        save_dataset(small_dataset, tmp_path / "ds")
        blob = (tmp_path / "ds" / "data.bin").read_bytes()
        assert blob[:6] == b"SYNDG1"
        count = int.from_bytes(blob[6:10], "little")
        c, h, w = (int.from_bytes(blob[10 + 4 * i:14 + 4 * i], "little")
                   for i in range(3))
        assert count == sum(d.images.shape[0] for d in small_dataset.domains)
        assert (c, h, w) == (3, 32, 16)
        assert len(blob) == 22 + count * (8 + 4 * c * h * w)

    def test_manifest_schema(self, small_dataset, tmp_path):
        save_dataset(small_dataset, tmp_path / "ds")
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert manifest["schema_version"] == 1
        for entry in manifest["domains"]:
            assert set(entry) == {"name", "identity_ids", "image_count",
                                  "style_params"}
            assert set(entry["style_params"]) == {"gain", "bias", "noise_std"}

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(ConfigurationError, match="manifest"):
            load_dataset(tmp_path)


class TestSampler:
    def test_batch_composition(self, small_dataset):
        rng = np.random.default_rng(0)
        batch = sample_batch(small_dataset.sources[0], p=4, k=3, rng=rng)
        assert batch.images.shape == (12, 3, 32, 16)
        values, counts = np.unique(batch.labels, return_counts=True)
        assert len(values) == 4
        assert np.all(counts == 3)

    def test_combined_batch_size_matches_convention(self):
        ds = generate(DatasetSpec())
        rng = np.random.default_rng(1)
        batches = [sample_batch(d, 16, 4, rng) for d in ds.sources]
        assert sum(b.images.shape[0] for b in batches) == 64 * 3

    def test_exhaustive_sampling(self, small_dataset):
        domain = small_dataset.sources[0]
        rng = np.random.default_rng(2)
        batch = sample_batch(domain, p=domain.num_classes, k=1, rng=rng)
        assert sorted(batch.labels.tolist()) == list(range(domain.num_classes))

    def test_oversampling_with_replacement(self, small_dataset):
        domain = small_dataset.sources[0]  # 5 images per identity
        rng = np.random.default_rng(3)
        batch = sample_batch(domain, p=2, k=8, rng=rng)
        assert batch.images.shape[0] == 16

    def test_p_too_large_raises(self, small_dataset):
        rng = np.random.default_rng(4)
        with pytest.raises(ConfigurationError, match="identities"):
            sample_batch(small_dataset.sources[0], p=99, k=1, rng=rng)

    def test_identity_selection_near_uniform(self, small_dataset):
        domain = small_dataset.sources[0]
        rng = np.random.default_rng(5)
        counts = np.zeros(domain.num_classes)
        n_batches = 3000
        for _ in range(n_batches):
            chosen = rng.choice(domain.num_classes, size=3, replace=False)
            counts[chosen] += 1
        freq = counts / counts.sum()
        assert np.all(np.abs(freq - 1 / domain.num_classes)
                      < 0.05 / domain.num_classes * domain.num_classes)

    def test_augmentation_keeps_shape_and_range(self, small_dataset):
        rng = np.random.default_rng(6)
        batch = sample_batch(small_dataset.sources[0], p=3, k=2, rng=rng,
                             augment=True)
        assert batch.images.shape[1:] == (3, 32, 16)
        assert batch.images.min() >= 0.0 and batch.images.max() <= 1.0

    def test_no_augment_returns_raw_images(self, small_dataset):
        domain = small_dataset.sources[0]
        rng = np.random.default_rng(7)
        batch = sample_batch(domain, p=2, k=2, rng=rng, augment=False)
        for img, label in zip(batch.images, batch.labels):
            pool = domain.images[domain.labels == label]
            assert any(np.array_equal(img, cand) for cand in pool)
