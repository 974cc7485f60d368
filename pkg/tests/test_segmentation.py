from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from oracles import binary_close_reference
from surgrecon.geometry import InvalidInputError
from surgrecon.io import IngestionError, write_pgm
from surgrecon.segmentation import (
    ChromaMask, FileMask, NoMask, ToolMask, apply_mask, default_radii, disk, make_provider,
    morph_refine, segment,
)
from surgrecon.sim import Simulator, preset
from surgrecon.stereo import DepthMap, Status

masks = arrays(bool, st.tuples(st.integers(3, 24), st.integers(3, 24)))


def test_none_provider_is_empty():
    m = segment(np.zeros((4, 5, 3)), NoMask())
    assert m.shape == (4, 5) and not m.mask.any()


def test_chroma_matches_simulator_truth():
    f = Simulator(preset("tool_sweep")).frame(30)
    m = segment(f.left, ChromaMask(), 30).mask
    gt = f.tool_mask
    iou = (m & gt).sum() / (m | gt).sum()
    assert iou >= 0.99


def test_file_provider_passthrough(tmp_path):
    f = Simulator(preset("tool_sweep")).frame(20)
    write_pgm(tmp_path / "mask_000020.pgm", f.tool_mask.astype(np.uint8) * 255)
    m = segment(f.left, make_provider("file", tmp_path), 20)
    assert np.array_equal(m.mask, f.tool_mask)


def test_file_provider_missing_names_frame(tmp_path):
    with pytest.raises(IngestionError, match="frame 7"):
        FileMask(tmp_path)(np.zeros((4, 4, 3)), 7)


def test_unknown_provider():
    with pytest.raises(InvalidInputError):
        make_provider("unet")


def test_default_radii_scale():
    assert default_radii(640) == (3, 2)
    assert default_radii(1280) == (6, 4)
    assert default_radii(320) == (2, 1)


class TestMorphology:
    def test_full_mask_stays_full(self):
        m = ToolMask(np.ones((10, 12), dtype=bool))
        assert morph_refine(m, 3, 2).mask.all()

    def test_pinhole_filled(self):
        a = np.zeros((11, 11), dtype=bool)
        a[3:8, 3:8] = True
        a[5, 5] = False
        out = morph_refine(ToolMask(a), 2, 0).mask
        assert out[5, 5]
        np.testing.assert_array_equal(out, binary_close_reference(a, 2) | a)

    def test_zero_radii_identity(self, rng):
        a = rng.random((9, 9)) > 0.5
        assert np.array_equal(morph_refine(ToolMask(a), 0, 0).mask, a)

    def test_negative_radius(self):
        with pytest.raises(InvalidInputError):
            morph_refine(ToolMask(np.zeros((3, 3), dtype=bool)), -1, 0)

    @settings(max_examples=60, deadline=None)
    @given(masks, st.integers(0, 3), st.integers(0, 3))
    def test_superset_of_closing(self, a, r1, r2):
        out = morph_refine(ToolMask(a), r1, r2).mask
        closed = ndimage.binary_closing(a, structure=disk(r1)) if r1 else a
        assert np.all(out[closed])
        assert np.all(out[a])
        assert out.sum() >= a.sum()


class TestApplyMask:
    def _depth(self, rng, shape=(6, 7)):
        return DepthMap.from_depth(rng.uniform(0.05, 0.2, size=shape))

    def test_empty_mask_unchanged(self, rng):
        d = self._depth(rng)
        out = apply_mask(d, ToolMask(np.zeros(d.shape, dtype=bool)))
        assert out.depth.tobytes() == d.depth.tobytes()

    def test_full_mask(self, rng):
        d = self._depth(rng)
        assert not apply_mask(d, ToolMask(np.ones(d.shape, dtype=bool))).valid.any()

    def test_size_mismatch(self, rng):
        with pytest.raises(InvalidInputError):
            apply_mask(self._depth(rng), ToolMask(np.zeros((2, 2), dtype=bool)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(bool, (6, 7)))
    def test_unmasked_bit_exact(self, m):
        d = self._depth(np.random.default_rng(0))
        out = apply_mask(d, ToolMask(m))
        assert out.depth[~m].tobytes() == d.depth[~m].tobytes()
        assert np.all(out.status[m] == Status.INVALID)
