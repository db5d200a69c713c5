from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rect_mask
from promptseg.maskops import (
    BoundingBox,
    MaskError,
    MaskRLE,
    binary_iou,
    erode,
    mask_centroid,
    palette_color,
    render_marks_overlay,
    resize_longest_side,
    resized_dims,
    rle_decode,
    rle_encode,
)


def iou_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Brute-force pixel enumeration, independent of the vectorized path."""
    inter = union = 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            pa, pb = bool(a[y, x]), bool(b[y, x])
            inter += pa and pb
            union += pa or pb
    return 1.0 if union == 0 else inter / union


class TestRLE:
    def test_all_zeros(self):
        rle = rle_encode(np.zeros((2, 2), dtype=np.uint8))
        assert rle.counts == (4,)
        assert rle.size == (2, 2)

    def test_all_ones(self):
        rle = rle_encode(np.ones((2, 2), dtype=np.uint8))
        assert rle.counts == (0, 4)

    def test_hand_derived_column_major(self):
        # pixel (row 0, col 1) only; column-major flattening is [0,0,1,0]
        m = np.zeros((2, 2), dtype=np.uint8)
        m[0, 1] = 1
        rle = rle_encode(m)
        assert rle.counts == (2, 1, 1)
        np.testing.assert_array_equal(rle_decode(rle), m)

    def test_decode_counts_mismatch(self):
        with pytest.raises(MaskError):
            rle_decode(MaskRLE(size=(2, 2), counts=(3,)))

    def test_roundtrip_500_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            h = int(rng.integers(1, 65))
            w = int(rng.integers(1, 65))
            m = (rng.random((h, w)) < rng.random()).astype(np.uint8)
            rle = rle_encode(m)
            assert sum(rle.counts) == h * w
            np.testing.assert_array_equal(rle_decode(rle), m)
            # decode-then-encode is also the identity on canonical RLEs
            assert rle_encode(rle_decode(rle)) == rle

    def test_canonical_no_interior_zero_runs(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            m = (rng.random((9, 5)) < 0.5).astype(np.uint8)
            counts = rle_encode(m).counts
            assert all(c > 0 for c in counts[1:])

    def test_empty_constructor(self):
        rle = MaskRLE.empty(4, 6)
        assert rle.foreground == 0
        assert rle_decode(rle).sum() == 0

    def test_json_roundtrip(self):
        m = rect_mask(5, 7, 1, 3, 2, 6)
        rle = rle_encode(m)
        assert MaskRLE.from_json(rle.to_json()) == rle


class TestIoU:
    def test_identical_nonempty(self):
        m = rect_mask(4, 4, 0, 2, 0, 2)
        assert binary_iou(m, m) == 1.0

    def test_disjoint(self):
        a = rect_mask(4, 4, 0, 2, 0, 2)
        b = rect_mask(4, 4, 2, 4, 2, 4)
        assert binary_iou(a, b) == 0.0

    def test_hand_enumerated_overlap(self):
        a = rect_mask(4, 4, 0, 2, 0, 2)
        b = rect_mask(4, 4, 0, 2, 1, 3)
        assert binary_iou(a, b) == pytest.approx(1 / 3)
        assert iou_oracle(a, b) == pytest.approx(1 / 3)

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert binary_iou(z, z) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(MaskError):
            binary_iou(np.zeros((2, 2)), np.zeros((3, 3)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetry_and_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        b = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        assert binary_iou(a, b) == binary_iou(b, a)
        assert binary_iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-12)


class TestErode:
    def test_kernel_one_is_identity(self):
        rng = np.random.default_rng(0)
        m = (rng.random((6, 6)) < 0.5).astype(np.uint8)
        np.testing.assert_array_equal(erode(m, 1, 1), m)

    def test_seven_by_seven_all_ones(self):
        m = np.ones((7, 7), dtype=np.uint8)
        expected = rect_mask(7, 7, 2, 5, 2, 5)
        np.testing.assert_array_equal(erode(m, 5, 1), expected)

    def test_iteration_composition(self):
        rng = np.random.default_rng(1)
        m = (rng.random((20, 20)) < 0.7).astype(np.uint8)
        np.testing.assert_array_equal(erode(m, 5, 2), erode(erode(m, 5, 1), 5, 1))

    def test_anti_extensive(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            m = (rng.random((15, 15)) < 0.6).astype(np.uint8)
            e = erode(m, 3, 1)
            assert np.all(e <= m)

    def test_even_kernel_rejected(self):
        with pytest.raises(MaskError):
            erode(np.ones((4, 4), dtype=np.uint8), 4, 1)


class TestResize:
    def test_exact_halving(self):
        img = np.zeros((2048, 1024, 3), dtype=np.uint8)
        out = resize_longest_side(img, 1024)
        assert out.shape == (1024, 512, 3)

    def test_already_at_target_unchanged(self):
        img = np.zeros((1024, 768, 3), dtype=np.uint8)
        assert resize_longest_side(img, 1024) is img

    def test_mask_upscale_dims(self):
        m = rect_mask(480, 640, 100, 300, 200, 500)
        out = resize_longest_side(m, 1024)
        assert out.shape == (768, 1024)
        assert set(np.unique(out)) <= {0, 1}

    def test_round_half_up(self):
        # 3:2 aspect: 1024 * 333/500 = 681.984 -> rounds to 682
        assert resized_dims(500, 333, 1024) == (1024, 682)
        # short side exactly .5 rounds up
        assert resized_dims(100, 10, 105) == (105, 11)  # 10*105/100 = 10.5

    def test_roundtrip_iou_on_rectangles(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            y0, x0 = int(rng.integers(0, 200)), int(rng.integers(0, 300))
            m = rect_mask(480, 640, y0, y0 + int(rng.integers(80, 250)), x0, x0 + int(rng.integers(80, 300)))
            up = resize_longest_side(m, 1024)
            down = resize_longest_side(up, 640)
            assert down.shape == m.shape
            assert binary_iou(m, down) >= 0.9

    def test_bilinear_preserves_constant(self):
        img = np.full((64, 32, 3), 77, dtype=np.uint8)
        out = resize_longest_side(img, 128)
        assert out.shape == (128, 64, 3)
        assert np.all(out == 77)


class TestOverlay:
    def _image(self, h=100, w=120):
        rng = np.random.default_rng(9)
        return rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8)

    def test_empty_regions_identity_copy(self):
        img = self._image()
        out = render_marks_overlay(img, [])
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_full_frame_label_at_center(self):
        img = self._image(64, 64)
        out = render_marks_overlay(img, [(1, np.ones((64, 64), dtype=np.uint8))])
        assert mask_centroid(np.ones((64, 64), dtype=np.uint8)) == (31, 31)
        # some pixels near center took on palette color 1
        color = np.array(palette_color(1))
        window = out[24:40, 24:40]
        assert np.any(np.all(window == color, axis=-1))

    def test_two_blobs_labeled_in_their_boxes_deterministic(self):
        img = self._image(80, 80)
        m1 = rect_mask(80, 80, 10, 20, 10, 20)
        m2 = rect_mask(80, 80, 50, 60, 50, 60)
        out1 = render_marks_overlay(img, [(1, m1), (2, m2)])
        out2 = render_marks_overlay(img, [(1, m1), (2, m2)])
        np.testing.assert_array_equal(out1, out2)
        for idx, (y0, y1, x0, x1) in [(1, (10, 20, 10, 20)), (2, (50, 60, 50, 60))]:
            color = np.array(palette_color(idx))
            box = out1[y0:y1, x0:x1]
            assert np.any(np.all(box == color, axis=-1)), f"label {idx} missing from its blob"

    def test_input_never_mutated(self):
        img = self._image()
        before = img.copy()
        render_marks_overlay(img, [(3, rect_mask(100, 120, 5, 50, 5, 50))])
        np.testing.assert_array_equal(img, before)

    def test_duplicate_indices_rejected(self):
        img = self._image(20, 20)
        m = rect_mask(20, 20, 2, 8, 2, 8)
        with pytest.raises(MaskError):
            render_marks_overlay(img, [(1, m), (1, m)])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(MaskError):
            render_marks_overlay(self._image(20, 20), [(1, np.ones((10, 10), dtype=np.uint8))])


class TestBoundingBox:
    def test_degenerate_rejected(self):
        with pytest.raises(MaskError):
            BoundingBox(5, 5, 5, 9)

    def test_clamped(self):
        box = BoundingBox(10, 10, 500, 400).clamped(height=100, width=200)
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (10, 10, 200, 100)
