"""Synthetic generators, dataset views, caching and the CIFAR-10 reader."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiperceiver.datasets import (CIFAR_RECORD, Dataset, DatasetFormatError, DatasetSpec, cache_dataset,
                                  gen_bimodal, gen_local_pattern, gen_point_set, gen_shapes_seg, gen_smooth_field,
                                  gradient_histogram, load_cached_dataset, load_cifar_binary, render_shapes,
                                  sample_tokens, shapes_seg_layout, smooth_field_basis)
from hiperceiver.tokens import shuffle_permutation


class TestPurity:
    @pytest.mark.parametrize("kind", ["smooth-field", "local-pattern", "shapes-seg", "point-set", "bimodal"])
    def test_bit_identical(self, kind):
        spec = DatasetSpec(kind, grid=16, points=64, wave_len=32, seed=5)
        a, ta = sample_tokens(spec, 17)
        b, tb = sample_tokens(spec, 17)
        assert a.tokens.tobytes() == b.tokens.tobytes()
        assert np.asarray(ta).tobytes() == np.asarray(tb).tobytes()

    def test_indices_differ(self):
        spec = DatasetSpec("smooth-field", grid=16)
        assert not np.array_equal(gen_smooth_field(spec, 0), gen_smooth_field(spec, 1))

    def test_splits_disjoint(self):
        spec = DatasetSpec(train_size=100, val_size=20)
        assert set(spec.split_range("train")).isdisjoint(spec.split_range("val"))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown dataset kind"):
            DatasetSpec("mnist")

    def test_roundtrip(self):
        spec = DatasetSpec("point-set", components=(2, 4), seed=3)
        assert DatasetSpec.from_dict(spec.to_dict()) == spec


class TestSmoothField:
    def test_normalized(self):
        img = gen_smooth_field(DatasetSpec(grid=32), 3)
        assert abs(img.mean()) < 1e-12 and img.std() == pytest.approx(1.0)

    def test_zero_sinusoids_is_noise(self):
        spec = DatasetSpec(grid=32, components=(0, 0), noise=1.0)
        img = gen_smooth_field(spec, 0)
        # white noise: neighbouring pixels uncorrelated
        assert abs(np.corrcoef(img[:, :-1].ravel(), img[:, 1:].ravel())[0, 1]) < 0.1

    def test_noiseless_masked_pixels_are_linearly_predictable(self):
        spec = DatasetSpec(grid=32, noise=0.0)
        img = gen_smooth_field(spec, 11)
        freqs, _, _ = smooth_field_basis(spec, 11)
        c = np.arange(32) / 32
        v, u = np.meshgrid(c, c, indexing="ij")
        cols = [np.ones(u.size)]
        for fx, fy in freqs:
            arg = 2 * np.pi * (fx * u + fy * v).ravel()
            cols += [np.cos(arg), np.sin(arg)]
        basis = np.stack(cols, axis=1)
        rng = np.random.default_rng(0)
        masked = rng.choice(img.size, int(0.85 * img.size), replace=False)
        visible = np.setdiff1d(np.arange(img.size), masked)
        coef, *_ = np.linalg.lstsq(basis[visible], img.ravel()[visible], rcond=None)
        mse = np.mean((basis[masked] @ coef - img.ravel()[masked]) ** 2)
        assert mse < 1e-20


class TestLocalPattern:
    def test_labels_and_shape(self):
        spec = DatasetSpec("local-pattern", grid=32)
        labels = {gen_local_pattern(spec, i)[1] for i in range(40)}
        assert labels == {0, 1, 2, 3}
        assert gen_local_pattern(spec, 0)[0].shape == (32, 32)

    def test_gradient_histogram_oracle(self):
        spec = DatasetSpec("local-pattern", grid=32, noise=0.1)
        feats, labels = [], []
        for i in range(768):
            img, lab = gen_local_pattern(spec, i)
            feats.append(gradient_histogram(img))
            labels.append(lab)
        feats, labels = np.array(feats), np.array(labels)
        centroids = np.stack([feats[:512][labels[:512] == k].mean(0) for k in range(4)])
        pred = np.argmin(((feats[512:, None] - centroids[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == labels[512:]) >= 0.9


class TestShapesSeg:
    def test_classes(self):
        spec = DatasetSpec("shapes-seg", grid=32)
        img, labels = gen_shapes_seg(spec, 0)
        assert set(np.unique(labels)) <= {0, 1, 2}
        assert img.shape == labels.shape == (32, 32)

    def test_empty_scene_all_background(self):
        assert np.all(render_shapes([], 16) == 0)

    def test_area_oracle(self):
        spec = DatasetSpec("shapes-seg", grid=64)
        checked = 0
        for i in range(200):
            layout = shapes_seg_layout(spec, i)
            if len(layout) != 1:
                continue
            labels = render_shapes(layout, 64)
            s = layout[0]
            if s[0] == "rect":
                _, y0, x0, y1, x1 = s
                assert np.sum(labels == 1) == (y1 - y0) * (x1 - x0)
            else:
                r = s[3]
                assert abs(np.sum(labels == 2) - np.pi * r * r) <= 2 * np.pi * (r + 1)
            checked += 1
        assert checked >= 20

    def test_intensity_follows_labels(self):
        spec = DatasetSpec("shapes-seg", grid=32, noise=0.0)
        img, labels = gen_shapes_seg(spec, 4)
        assert np.all(img[labels == 1] == 1.0) and np.all(img[labels == 2] == -1.0) and np.all(img[labels == 0] == 0)


class TestPointSet:
    def test_shape_and_centroid(self):
        pts, label = gen_point_set(DatasetSpec("point-set"), 0)
        assert pts.shape == (2048, 3)
        np.testing.assert_allclose(pts.mean(0), 0.0, atol=1e-12)
        assert 0 <= label < 4

    def test_permutation_keeps_label(self, rng):
        spec = DatasetSpec("point-set", points=128)
        pts, label = gen_point_set(spec, 3)
        assert gen_point_set(spec, 3)[1] == label
        assert not np.array_equal(pts, pts[rng.permutation(128)])

    def test_too_many_classes(self):
        with pytest.raises(ValueError):
            gen_point_set(DatasetSpec("point-set", num_classes=9), 0)


class TestBimodal:
    def test_concat_length(self):
        tokens, label = sample_tokens(DatasetSpec("bimodal", grid=32, wave_len=256), 0)
        assert tokens.num_tokens == 1280
        assert tokens.modality_segments == [(0, 0, 1024), (1, 1024, 256)]

    def test_waveform_alone_identifies_class(self):
        # oracle: the dominant FFT bin of the waveform is 4 * (label + 1)
        spec = DatasetSpec("bimodal", grid=8, wave_len=256)
        for i in range(30):
            _, wave, label = gen_bimodal(spec, i)
            spectrum = np.abs(np.fft.rfft(wave))
            spectrum[:4] = 0
            assert int(np.argmax(spectrum)) == 4 * (label + 1)


class TestDatasetView:
    def test_batch_shapes(self):
        ds = Dataset(DatasetSpec("shapes-seg", grid=16, train_size=8, val_size=4))
        x, y, seg = ds.batch([0, 3])
        assert x.shape == (2, 256, 1) and x.dtype == np.float32
        assert y.shape == (2, 256)
        assert seg == [(0, 0, 256)]

    def test_shuffle_moves_targets_too(self):
        spec = DatasetSpec("shapes-seg", grid=16, train_size=4, val_size=2)
        plain, shuffled = Dataset(spec), Dataset(spec, shuffle_seed=9)
        perm = shuffle_permutation(256, 9)[0]
        tp, yp = plain.item(1)
        ts, ys = shuffled.item(1)
        assert np.array_equal(ts.tokens, tp.tokens[perm])
        assert np.array_equal(ys, yp[perm])

    def test_val_split_offsets(self):
        spec = DatasetSpec("local-pattern", grid=8, train_size=10, val_size=3)
        val = Dataset(spec, "val")
        assert len(val) == 3
        assert np.array_equal(val.item(0)[0].tokens, sample_tokens(spec, 10)[0].tokens)

    def test_cache_roundtrip(self, tmp_path):
        spec = DatasetSpec("local-pattern", grid=8, train_size=3, val_size=1)
        path = cache_dataset(spec, tmp_path / "lp.hipckpt")
        back, data, target = load_cached_dataset(path)
        assert back == spec
        assert sorted(data) == [0, 1, 2]
        np.testing.assert_array_equal(data[2], sample_tokens(spec, 2)[0].tokens.astype(np.float32))
        assert target[1].shape == () and int(target[1]) == int(sample_tokens(spec, 1)[1])


class TestCifar:
    def _write(self, path, records=10_000, label=3):
        rng = np.random.default_rng(0)
        rec = rng.integers(0, 256, (records, CIFAR_RECORD), dtype=np.uint8)
        rec[:, 0] = label
        rec.tofile(path)
        return rec

    def test_reads_records(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        rec = self._write(path)
        assert path.stat().st_size == 30_730_000
        grids, labels = load_cifar_binary(path)
        assert grids.shape == (10_000, 32, 32, 3) and labels.shape == (10_000,)
        # channel-major bytes become per-pixel interleaved
        assert grids[5, 2, 7, 1] == np.float32(rec[5, 1 + 1024 + 2 * 32 + 7]) / np.float32(255.0)
        assert 0.0 <= grids.min() and grids.max() <= 1.0

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.bin"
        np.zeros(CIFAR_RECORD * 10, dtype=np.uint8).tofile(path)
        with pytest.raises(DatasetFormatError, match="expected 30730000 bytes"):
            load_cifar_binary(path)

    def test_label_range(self, tmp_path):
        path = tmp_path / "bad.bin"
        self._write(path, label=10)
        with pytest.raises(DatasetFormatError, match="outside"):
            load_cifar_binary(path)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 100))
def test_generation_is_pure(idx, seed):
    spec = DatasetSpec("local-pattern", grid=8, seed=seed)
    a, la = gen_local_pattern(spec, idx)
    b, lb = gen_local_pattern(spec, idx)
    assert la == lb and a.tobytes() == b.tobytes()
