"""Core geometry and discretization tests.

The reference implementations here (rational-arithmetic binning, pure-python
patch cropping) are deliberately independent of the library code paths.
"""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisygrasp.core import (
    AngleBinning,
    GraspConfig,
    PatchSet,
    RobotContext,
    candidate_patches,
    clip_to_scene,
    discretize_angle,
    extract_patch,
    patch_offsets,
)
from noisygrasp.errors import InvalidInputError


# ---------------------------------------------------------------------------
# Reference implementations (oracles)
# ---------------------------------------------------------------------------

def bin_oracle(theta: float, n_bins: int) -> int:
    """Exact rational evaluation of floor(reduced / (pi / n)), clamped.

    Avoids float division entirely: the only floats involved are the inputs
    themselves, promoted to exact rationals.
    """
    reduced = theta % math.pi
    width = Fraction(math.pi) / n_bins
    idx = int(Fraction(reduced) / width)
    return min(idx, n_bins - 1)


def patch_oracle(scene: np.ndarray, center, size: int) -> np.ndarray:
    """Per-pixel crop with index clamping (equivalent to edge replication)."""
    cx = int(math.floor(center[0] + 0.5))
    cy = int(math.floor(center[1] + 0.5))
    h, w = scene.shape[:2]
    out = np.zeros((size, size, 3), dtype=np.uint8)
    for r in range(size):
        for c in range(size):
            sy = min(max(cy - size // 2 + r, 0), h - 1)
            sx = min(max(cx - size // 2 + c, 0), w - 1)
            out[r, c] = scene[sy, sx]
    return out


def _random_scene(rng, h=40, w=48):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


# ---------------------------------------------------------------------------
# Angle binning
# ---------------------------------------------------------------------------

class TestDiscretizeAngle:
    def test_lower_boundary(self):
        assert discretize_angle(0.0, AngleBinning(18)) == 0

    def test_midpoint(self):
        assert discretize_angle(math.pi / 2, AngleBinning(18)) == 9

    def test_upper_boundary_clamps(self):
        assert discretize_angle(math.pi - 1e-9, AngleBinning(18)) == 17

    def test_non_finite_rejected(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(InvalidInputError):
                discretize_angle(bad, AngleBinning(18))

    @pytest.mark.parametrize("n_bins", [1, 2, 5, 18, 37])
    def test_matches_rational_oracle(self, n_bins):
        rng = np.random.default_rng(42)
        binning = AngleBinning(n_bins)
        width = math.pi / n_bins
        for theta in rng.uniform(0.0, math.pi, size=2000):
            # stay off the bin edges where float division and exact
            # rational floor may legitimately differ by one ulp
            if abs(theta / width - round(theta / width)) < 1e-9:
                continue
            assert discretize_angle(float(theta), binning) == bin_oracle(float(theta), n_bins)

    def test_result_always_in_range(self):
        rng = np.random.default_rng(7)
        binning = AngleBinning(18)
        for theta in rng.uniform(-20.0, 20.0, size=2000):
            assert 0 <= discretize_angle(float(theta), binning) < 18

    @given(st.floats(min_value=0.0, max_value=math.pi, exclude_max=True))
    @settings(max_examples=300)
    def test_mod_pi_symmetry(self, theta):
        """Shifting by pi never changes the bin, away from bin edges."""
        binning = AngleBinning(18)
        width = binning.bin_width
        frac = (theta % width) / width
        if min(frac, 1.0 - frac) < 1e-6:
            return
        assert discretize_angle(theta, binning) == discretize_angle(theta + math.pi, binning)

    def test_bad_binning(self):
        with pytest.raises(InvalidInputError):
            AngleBinning(0)
        with pytest.raises(InvalidInputError):
            AngleBinning(-3)

    def test_bin_center_roundtrip(self):
        binning = AngleBinning(18)
        for k in range(18):
            assert discretize_angle(binning.bin_center(k), binning) == k
        with pytest.raises(InvalidInputError):
            binning.bin_center(18)


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

class TestExtractPatch:
    def test_interior_crop_equals_subraster(self):
        rng = np.random.default_rng(0)
        scene = _random_scene(rng, 64, 64)
        patch = extract_patch(scene, (32, 32), 16)
        assert np.array_equal(patch, scene[24:40, 24:40])

    def test_corner_replication(self):
        rng = np.random.default_rng(1)
        scene = _random_scene(rng, 32, 32)
        patch = extract_patch(scene, (0, 0), 8)
        assert np.all(patch[:4, :4] == scene[0, 0])

    def test_constant_scene(self):
        scene = np.full((20, 20, 3), 77, dtype=np.uint8)
        patch = extract_patch(scene, (3, 17), 10)
        assert patch.shape == (10, 10, 3)
        assert np.all(patch == 77)

    def test_matches_reference_crop(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            h, w = int(rng.integers(16, 50)), int(rng.integers(16, 50))
            scene = _random_scene(rng, h, w)
            size = int(rng.choice([4, 8, 12]))
            cx = float(rng.uniform(0, w - 1))
            cy = float(rng.uniform(0, h - 1))
            got = extract_patch(scene, (cx, cy), size)
            assert np.array_equal(got, patch_oracle(scene, (cx, cy), size))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        scene = _random_scene(rng)
        a = extract_patch(scene, (10.3, 20.7), 12)
        b = extract_patch(scene, (10.3, 20.7), 12)
        assert np.array_equal(a, b)

    def test_center_outside_rejected(self):
        scene = np.zeros((16, 16, 3), dtype=np.uint8)
        for bad in [(-1.0, 5.0), (5.0, -1.0), (16.0, 5.0), (5.0, 99.0)]:
            with pytest.raises(InvalidInputError):
                extract_patch(scene, bad, 8)

    def test_bad_size_rejected(self):
        scene = np.zeros((16, 16, 3), dtype=np.uint8)
        with pytest.raises(InvalidInputError):
            extract_patch(scene, (8, 8), 7)
        with pytest.raises(InvalidInputError):
            extract_patch(scene, (8, 8), 0)

    @given(st.integers(min_value=0, max_value=31), st.integers(min_value=0, max_value=31))
    @settings(max_examples=100, deadline=None)
    def test_reference_agreement_property(self, cx, cy):
        scene = np.random.default_rng(cx * 100 + cy).integers(
            0, 256, size=(32, 32, 3), dtype=np.uint8
        )
        got = extract_patch(scene, (float(cx), float(cy)), 8)
        assert np.array_equal(got, patch_oracle(scene, (cx, cy), 8))


# ---------------------------------------------------------------------------
# Hypothesis offsets and candidate patch sets
# ---------------------------------------------------------------------------

class TestPatchOffsets:
    def test_shape_and_center(self):
        offs = patch_offsets(16.0)
        assert len(offs) == 9
        assert offs[0] == (0.0, 0.0)

    def test_norms_equal_d(self):
        for d in (16.0, 12.0, 5.5):
            for dx, dy in patch_offsets(d)[1:]:
                assert math.hypot(dx, dy) == pytest.approx(d, rel=1e-12)

    def test_offsets_sum_to_zero_exactly(self):
        # the eight directions form exact negation pairs, so the correctly
        # rounded sum (fsum) of each coordinate is exactly zero
        offs = patch_offsets(16.0)
        assert math.fsum(dx for dx, _ in offs) == 0.0
        assert math.fsum(dy for _, dy in offs) == 0.0

    def test_opposite_directions_are_exact_negations(self):
        offs = patch_offsets(7.3)[1:]
        for k in range(4):
            dx, dy = offs[k]
            ox, oy = offs[k + 4]
            assert (ox, oy) == (-dx, -dy)

    def test_axis_and_diagonal_structure(self):
        offs = patch_offsets(16.0)
        assert (16.0, 0.0) in offs and (0.0, -16.0) in offs
        diag = 16.0 * math.sqrt(0.5)
        assert (diag, diag) in offs and (-diag, -diag) in offs

    def test_directions_distinct(self):
        offs = patch_offsets(8.0)[1:]
        angles = {round(math.atan2(dy, dx), 9) for dx, dy in offs}
        assert len(angles) == 8

    def test_nonpositive_d_rejected(self):
        with pytest.raises(InvalidInputError):
            patch_offsets(0.0)
        with pytest.raises(InvalidInputError):
            patch_offsets(-4.0)


class TestCandidatePatches:
    def test_constant_scene_all_identical(self):
        scene = np.full((64, 64, 3), 9, dtype=np.uint8)
        pset = candidate_patches(scene, (32, 32), 16, 8.0)
        for p in pset.patches[1:]:
            assert np.array_equal(p, pset.patches[0])

    def test_patches_match_extract_at_clipped_centers(self):
        rng = np.random.default_rng(11)
        scene = _random_scene(rng, 60, 60)
        center = (5.0, 57.0)  # close to two borders
        pset = candidate_patches(scene, center, 12, 9.0)
        for (dx, dy), patch in zip(pset.offsets, pset.patches):
            cx, cy = clip_to_scene(center[0] + dx, center[1] + dy, scene.shape[:2])
            assert np.array_equal(patch, extract_patch(scene, (cx, cy), 12))

    def test_interior_patch_centers_unclipped(self):
        rng = np.random.default_rng(12)
        scene = _random_scene(rng, 64, 64)
        pset = candidate_patches(scene, (32, 32), 8, 6.0)
        for (dx, dy), patch in zip(pset.offsets, pset.patches):
            assert np.array_equal(patch, extract_patch(scene, (32 + dx, 32 + dy), 8))

    def test_patchset_validates_count(self):
        with pytest.raises(InvalidInputError):
            PatchSet(patches=[np.zeros((2, 2, 3))] * 8, offsets=[(0.0, 0.0)] * 8)


# ---------------------------------------------------------------------------
# Remaining domain types
# ---------------------------------------------------------------------------

class TestRobotContext:
    def test_one_hot_single_entry(self):
        ctx = RobotContext(robot_id=2, pixel_location=(3.0, 4.0),
                           scene_image=np.zeros((8, 8, 3), dtype=np.uint8))
        vec = ctx.one_hot(4)
        assert vec.shape == (4,)
        assert vec[2] == 1.0 and vec.sum() == 1.0

    def test_one_hot_out_of_range(self):
        ctx = RobotContext(robot_id=5, pixel_location=(0.0, 0.0),
                           scene_image=np.zeros((8, 8, 3), dtype=np.uint8))
        with pytest.raises(InvalidInputError):
            ctx.one_hot(4)


class TestClipToScene:
    def test_inside_unchanged(self):
        assert clip_to_scene(3.5, 4.5, (10, 10)) == (3.5, 4.5)

    def test_clamps_to_last_pixel(self):
        assert clip_to_scene(-2.0, 99.0, (20, 30)) == (0.0, 19.0)


def test_grasp_config_is_value_type():
    a = GraspConfig(1.0, 2.0, 0.5)
    b = GraspConfig(1.0, 2.0, 0.5)
    assert a == b
