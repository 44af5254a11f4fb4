import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mffaseg.dataio import (AugmentParams, DatasetManifest, FrameSequence, ImageFormatError, LabeledFrame,
                            Photometric, Video, VideoEntry, apply_augment, augment_sequence,
                            extract_real_sequences, load_dataset, load_frame, load_manifest, read_pgm_mask,
                            read_ppm, save_frame, save_manifest)
from mffaseg.metrics import dsc
from mffaseg.toydata import ToyConfig, gen_toy_dataset, generate_videos, intensity_gap


class TestImageFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        f = LabeledFrame(rng.integers(0, 256, (5, 7, 3)).astype(np.uint8), rng.integers(0, 2, (5, 7)).astype(np.uint8))
        save_frame(f, tmp_path / "a.ppm", tmp_path / "a.pgm")
        g = load_frame(tmp_path / "a.ppm", tmp_path / "a.pgm")
        np.testing.assert_array_equal(f.image, g.image)
        np.testing.assert_array_equal(f.mask, g.mask)

    def test_mask_values_validated(self, tmp_path):
        (tmp_path / "m.pgm").write_bytes(b"P5\n2 1\n255\n" + bytes([0, 128]))
        with pytest.raises(ImageFormatError):
            read_pgm_mask(tmp_path / "m.pgm")

    def test_hand_encoded_ppm(self, tmp_path):
        px = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30])
        (tmp_path / "x.ppm").write_bytes(b"P6\n# comment\n2 2\n255\n" + px)
        img = read_ppm(tmp_path / "x.ppm")
        assert img.shape == (2, 2, 3)
        assert img[0, 0].tolist() == [255, 0, 0] and img[1, 1].tolist() == [10, 20, 30]

    @pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n\x00\x00\x00", b"P6\n2 2\n255\n\x00", b"P6\n1 1\n65535\n\x00\x00\x00"])
    def test_malformed(self, tmp_path, blob):
        (tmp_path / "bad.ppm").write_bytes(blob)
        with pytest.raises(ImageFormatError):
            read_ppm(tmp_path / "bad.ppm")

    def test_extent_mismatch(self):
        with pytest.raises(ImageFormatError):
            LabeledFrame(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5), np.uint8))


def video(n=30, size=8, stride=3):
    rng = np.random.default_rng(n)
    return Video("v", rng.integers(0, 256, (n, size, size, 3)).astype(np.uint8),
                 rng.integers(0, 2, (n, size, size)).astype(np.uint8), list(range(0, n, stride)))


class TestRealSequences:
    def test_indices(self):
        seqs, _ = extract_real_sequences([video()], 4)
        assert seqs[0].indices == [0, 3, 6, 9]

    def test_short_history_skipped(self):
        v = video()
        v.labeled_indices = [5, 9]
        seqs, report = extract_real_sequences([v], 4)
        assert [s.indices[-1] for s in seqs] == [9]
        assert report["skipped"] == 1 and report["skipped_at"] == [("v", 5)]

    def test_single_label_at_end(self):
        seqs, _ = extract_real_sequences([video()], 4)
        assert all(s.labeled_positions == [3] and s.real_index == 3 for s in seqs)


def seq(rng, n=3, size=12):
    frames = rng.integers(0, 256, (n, size, size, 3)).astype(np.uint8)
    mask = np.zeros((size, size), np.uint8)
    mask[3:8, 2:9] = 1
    return FrameSequence(frames, [mask.copy() for _ in range(n)], list(range(n)), n - 1)


class TestAugment:
    def test_shared_geometry(self):
        rng = np.random.default_rng(1)
        s = seq(rng)
        p = AugmentParams(True, False, 11.0, 1.07, (1.0, 0.5, 10.0, 10.5), tuple(Photometric() for _ in range(3)))
        out = apply_augment(s, p)
        for m in out.masks[1:]:
            assert dsc(m, out.masks[0]) == 1.0

    def test_identity(self):
        s = seq(np.random.default_rng(2))
        out = apply_augment(s, AugmentParams())
        np.testing.assert_array_equal(out.frames, s.frames)

    def test_hflip_involution(self):
        s = seq(np.random.default_rng(3))
        p = AugmentParams(hflip=True)
        twice = apply_augment(apply_augment(s, p), p)
        np.testing.assert_array_equal(twice.frames, s.frames)
        np.testing.assert_array_equal(twice.masks[0], s.masks[0])

    def test_oversized_crop_clamped(self):
        s = seq(np.random.default_rng(4))
        out = apply_augment(s, AugmentParams(crop=(-5.0, 3.0, 40.0, 40.0)))
        np.testing.assert_array_equal(out.frames, s.frames)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_binary_masks_and_range(self, seed):
        out = augment_sequence(seq(np.random.default_rng(seed)), np.random.default_rng(seed))
        assert out.frames.dtype == np.uint8
        for m in out.masks:
            assert set(np.unique(m)) <= {0, 1}

    def test_photometric_per_frame_count(self):
        with pytest.raises(ValueError):
            apply_augment(seq(np.random.default_rng(5)), AugmentParams(photometric=(Photometric(0.1),)))


class TestManifest:
    def test_json_round_trip(self):
        m = DatasetManifest((8, 8), [VideoEntry("a", ["a/0.ppm", "a/1.ppm"], [0], 1, ["a/0.pgm", "a/1.pgm"])])
        assert DatasetManifest.from_json(m.to_json()) == m

    def test_indices_must_increase(self):
        m = DatasetManifest((8, 8), [VideoEntry("a", ["x"] * 5, [3, 1])])
        with pytest.raises(ValueError):
            m.validate()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            DatasetManifest((8, 8), [VideoEntry("a", ["x"] * 5, [5])]).validate()

    def test_missing_file(self, tmp_path):
        save_manifest(tmp_path, DatasetManifest((8, 8), [VideoEntry("a", ["a.ppm"], [0])]))
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path)


SMALL = ToyConfig(videos=2, frames=30, folds=2)


class TestToyData:
    def test_fraction_bounds(self):
        videos, _ = generate_videos(SMALL, 0)
        for v in videos:
            frac = v.truth.reshape(len(v.truth), -1).mean(1)
            assert frac.min() >= 0.02 and frac.max() <= 0.20

    def test_seeded_bit_identical(self, tmp_path):
        gen_toy_dataset(SMALL, 4, tmp_path / "a")
        gen_toy_dataset(SMALL, 4, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_collapse_gap(self):
        cfg = ToyConfig(videos=1, frames=120)
        videos, flags = generate_videos(cfg, 1)
        v, f = videos[0], flags[0]
        assert f.mean() >= 0.2
        gaps = np.array([abs(intensity_gap(v.frames[t], v.truth[t])) for t in range(len(f))])
        assert gaps[f].mean() <= 0.25 * gaps[~f].mean()

    def test_disk_layout_loads(self, tmp_path):
        gen_toy_dataset(SMALL, 0, tmp_path)
        manifest, videos = load_dataset(tmp_path, folds=[1])
        assert [v.fold for v in videos] == [1]
        assert manifest.frame_size == (64, 64)
        assert videos[0].labeled_indices == list(range(0, 30, 3))
        meta = json.loads((tmp_path / "toy_meta.json").read_text())
        assert set(meta["contrast_collapse"]) == {"video00", "video01"}
