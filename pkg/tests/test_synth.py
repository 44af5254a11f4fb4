import numpy as np
import pytest

from mffaseg.metrics import dsc
from mffaseg.synth import (MovingParams, NoInstrument, Patch, SynthesisRanges, center_position,
                           extract_instrument, fully_contained, inpaint, interpolate_params,
                           sample_endpoint_params, synthesize_sequence, transform_paste)


def fixture(size=128, seed=0):
    """Textured frame with a bar-shaped instrument near the centre."""
    rng = np.random.default_rng(seed)
    frame = rng.integers(60, 140, (size, size, 3)).astype(np.uint8)
    mask = np.zeros((size, size), np.uint8)
    c = size // 2
    mask[c - 4:c + 5, c - 12:c + 13] = 1
    frame[mask == 1] = (210, 205, 215)
    return frame, mask


class TestEndpoints:
    def test_ranges(self):
        rng = np.random.default_rng(0)
        dx, dy, th = [], [], []
        for _ in range(5000):
            for p in sample_endpoint_params(rng):
                dx.append(p.dx)
                dy.append(p.dy)
                th.append(p.dtheta)
        a = np.abs(np.array(dx + dy))
        assert a.min() >= 15 and a.max() <= 40
        assert min(th) >= -30 and max(th) <= 30
        assert 0.47 <= np.mean(np.array(dx) > 0) <= 0.53

    def test_seeded(self):
        assert sample_endpoint_params(np.random.default_rng(3)) == sample_endpoint_params(np.random.default_rng(3))

    def test_range_validation(self):
        with pytest.raises(ValueError):
            SynthesisRanges(translation=(40, 15))
        with pytest.raises(ValueError):
            SynthesisRanges(rotation=(30, -30))


class TestInterpolation:
    def test_worked_example(self):
        out = interpolate_params(MovingParams(-30, 0, 0), MovingParams(30, 0, 0), 4)
        assert [p.dx for p in out] == [-30.0, 0.0, 15.0, 30.0]

    def test_two_frames_force_zero_first(self):
        out = interpolate_params(MovingParams(-20, 17, 5), MovingParams(30, -25, 10), 2)
        assert out[0] == MovingParams(0, 0, 0) and out[1] == MovingParams(30, -25, 10)

    def test_all_zero(self):
        assert all(p == MovingParams() for p in interpolate_params(MovingParams(), MovingParams(), 7))

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 8])
    def test_centre_is_zero(self, n):
        out = interpolate_params(MovingParams(12, -33, 7), MovingParams(-18, 25, -9), n)
        assert out[center_position(n) - 1] == MovingParams(0, 0, 0)
        assert out[-1] == MovingParams(-18, 25, -9)


class TestExtract:
    def test_full_frame(self):
        frame = np.random.default_rng(0).integers(0, 255, (6, 7, 3)).astype(np.uint8)
        p = extract_instrument(frame, np.ones((6, 7)))
        np.testing.assert_array_equal(p.image, frame)

    def test_single_pixel(self):
        mask = np.zeros((5, 5))
        mask[2, 3] = 1
        p = extract_instrument(np.full((5, 5, 3), 9, np.uint8), mask)
        assert p.mask.shape == (1, 1) and (p.y0, p.x0) == (2, 3)

    def test_l_shape_bounding_box(self):
        mask = np.zeros((8, 8))
        mask[1:6, 2] = 1
        mask[5, 2:7] = 1
        p = extract_instrument(np.zeros((8, 8, 3), np.uint8), mask)
        assert (p.y0, p.x0, *p.mask.shape) == (1, 2, 5, 5)
        assert (p.image[p.mask == 0] == 0).all()

    def test_empty(self):
        with pytest.raises(NoInstrument):
            extract_instrument(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4)))


class TestInpaint:
    def test_empty_mask(self):
        frame, _ = fixture(32)
        np.testing.assert_array_equal(inpaint(frame, np.zeros((32, 32))), frame)

    def test_constant_stays_constant(self):
        frame = np.full((16, 16, 3), 77, np.uint8)
        mask = np.zeros((16, 16))
        mask[4:10, 3:12] = 1
        np.testing.assert_array_equal(inpaint(frame, mask), frame)

    def test_single_pixel_hole(self):
        frame = np.zeros((3, 3, 1), np.uint8)
        frame[0, 1], frame[1, 0], frame[1, 2], frame[2, 1] = 10, 20, 30, 40
        mask = np.zeros((3, 3))
        mask[1, 1] = 1
        assert abs(int(inpaint(frame, mask)[1, 1, 0]) - 25) <= 0.5

    def test_unmasked_untouched(self):
        frame, mask = fixture(48)
        out = inpaint(frame, mask)
        np.testing.assert_array_equal(out[mask == 0], frame[mask == 0])

    def test_all_masked(self):
        frame = np.random.default_rng(1).integers(0, 255, (4, 4, 3)).astype(np.uint8)
        out = inpaint(frame, np.ones((4, 4)))
        assert (out == out[0, 0]).all()


class TestTransformPaste:
    def test_identity_round_trip(self):
        frame, mask = fixture(64)
        bg = inpaint(frame, mask)
        out, m = transform_paste(bg, extract_instrument(frame, mask), MovingParams())
        assert dsc(m, mask) >= 0.99
        assert np.abs(out.astype(int) - frame.astype(int))[mask == 1].max() <= 1

    def test_full_turn(self):
        frame, mask = fixture(64)
        bg = inpaint(frame, mask)
        patch = extract_instrument(frame, mask)
        _, a = transform_paste(bg, patch, MovingParams(0, 0, 360))
        _, b = transform_paste(bg, patch, MovingParams(0, 0, 0))
        assert dsc(a, b) >= 0.98

    def test_off_frame(self):
        frame, mask = fixture(64)
        bg = inpaint(frame, mask)
        out, m = transform_paste(bg, extract_instrument(frame, mask), MovingParams(500, 0, 0))
        assert not m.any()
        np.testing.assert_array_equal(out, bg)

    def test_integer_shift_exact_count(self):
        frame, mask = fixture(64)
        out, m = transform_paste(inpaint(frame, mask), extract_instrument(frame, mask), MovingParams(7, -5, 0))
        assert m.sum() == mask.sum()
        np.testing.assert_array_equal(m, np.roll(np.roll(mask, -5, 0), 7, 1))


class TestSequence:
    def test_default_length_and_centre(self):
        frame, mask = fixture()
        seq = synthesize_sequence(frame, mask, 4, np.random.default_rng(0))
        assert len(seq) == 4 and all(m is not None for m in seq.masks)
        np.testing.assert_array_equal(seq.frames[1], frame)
        np.testing.assert_array_equal(seq.masks[1], mask)
        assert seq.real_index == 1

    def test_seeded(self):
        frame, mask = fixture()
        a = synthesize_sequence(frame, mask, 4, np.random.default_rng(5))
        b = synthesize_sequence(frame, mask, 4, np.random.default_rng(5))
        np.testing.assert_array_equal(a.frames, b.frames)
        for x, y in zip(a.masks, b.masks):
            np.testing.assert_array_equal(x, y)

    def test_centroids_follow_translation(self):
        frame, mask = fixture()
        ys, xs = np.nonzero(mask)
        cy, cx = ys.mean(), xs.mean()
        drift, assigned = [], []
        rng = np.random.default_rng(2)
        for _ in range(10):
            seq, params = synthesize_sequence(frame, mask, 5, rng, return_params=True)
            for m, p in zip(seq.masks, params):
                my, mx = np.nonzero(m)
                drift += [mx.mean() - cx, my.mean() - cy]
                assigned += [p.dx, p.dy]
        r = np.corrcoef(drift, assigned)[0, 1]
        assert r * r >= 0.99

    def test_label_count_preserved_when_contained(self):
        frame, mask = fixture()
        rng = np.random.default_rng(3)
        patch = extract_instrument(frame, mask)
        for _ in range(20):
            seq, params = synthesize_sequence(frame, mask, 4, rng, return_params=True)
            for m, p in zip(seq.masks, params):
                if fully_contained(patch, p, mask.shape):
                    assert abs(int(m.sum()) - int(mask.sum())) <= 0.05 * mask.sum()

    def test_empty_label(self):
        frame, _ = fixture(32)
        with pytest.raises(NoInstrument):
            synthesize_sequence(frame, np.zeros((32, 32)), 4, np.random.default_rng(0))
