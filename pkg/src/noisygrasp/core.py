"""Domain types, angle discretization, and patch geometry.

Conventions used throughout the package:

* Images are numpy ``uint8`` arrays of shape (H, W, 3), RGB.
* Pixel coordinates are (x, y) with x the column and y the row, so a
  pixel is addressed as ``image[y, x]``.
* Grasp angles are end-effector roll in radians; a parallel-jaw grasp is
  symmetric under rotation by pi, so angles live in [0, pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

# Unit vectors for the eight compass directions, counterclockwise from +x.
# A single shared constant for the diagonal component keeps opposite
# directions exact negations of each other (offsets sum to zero exactly).
_DIAG = math.sqrt(0.5)
COMPASS_DIRECTIONS = (
    (1.0, 0.0),
    (_DIAG, _DIAG),
    (0.0, 1.0),
    (-_DIAG, _DIAG),
    (-1.0, 0.0),
    (-_DIAG, -_DIAG),
    (0.0, -1.0),
    (_DIAG, -_DIAG),
)


@dataclass(frozen=True)
class GraspConfig:
    """A planar grasp: position in scene pixels plus roll angle in [0, pi)."""

    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class AngleBinning:
    """Partition of [0, pi) into n_bins equal angle bins."""

    n_bins: int

    def __post_init__(self):
        if self.n_bins <= 0:
            raise InvalidInputError(f"n_bins must be positive, got {self.n_bins}")

    @property
    def bin_width(self) -> float:
        return math.pi / self.n_bins

    def bin_center(self, index: int) -> float:
        if not 0 <= index < self.n_bins:
            raise InvalidInputError(f"bin index {index} out of range [0, {self.n_bins})")
        return (index + 0.5) * self.bin_width


@dataclass(frozen=True)
class RobotContext:
    """Environment variables attached to a grasp attempt.

    The noise model conditions on these and nothing else: which robot
    executed the grasp, where in the image it was commanded, and the full
    scene image.
    """

    robot_id: int
    pixel_location: tuple[float, float]
    scene_image: np.ndarray

    def one_hot(self, n_robots: int) -> np.ndarray:
        if not 0 <= self.robot_id < n_robots:
            raise InvalidInputError(
                f"robot_id {self.robot_id} out of range [0, {n_robots})"
            )
        vec = np.zeros(n_robots, dtype=np.float32)
        vec[self.robot_id] = 1.0
        return vec


@dataclass
class GraspRecord:
    """One datapoint: scene, commanded-grasp patch, grasp, label, context."""

    scene_image: np.ndarray
    patch: np.ndarray
    grasp: GraspConfig
    success: bool
    context: RobotContext


@dataclass
class PatchSet:
    """The nine-patch hypothesis set for where a grasp was actually executed.

    ``patches[0]`` is the patch at the commanded center; patches 1..8 sit at
    the eight compass offsets, all at Euclidean distance ``offsets`` norm d
    from the center. Offsets are stored as exact float displacement vectors;
    rounding to the pixel grid happens at extraction time.
    """

    patches: list = field(default_factory=list)
    offsets: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.patches) != 9 or len(self.offsets) != 9:
            raise InvalidInputError("a PatchSet holds exactly 9 patches and offsets")


def patch_offsets(d: float) -> list[tuple[float, float]]:
    """Center offset plus the eight compass offsets at Euclidean norm d."""
    if not d > 0:
        raise InvalidInputError(f"offset distance d must be positive, got {d}")
    return [(0.0, 0.0)] + [(d * ux, d * uy) for ux, uy in COMPASS_DIRECTIONS]


def discretize_angle(theta: float, binning: AngleBinning) -> int:
    """Map an angle to its bin index after reduction modulo pi.

    The reduced angle lies in [0, pi); the result is floor(theta/width)
    clamped to n_bins - 1 so theta values a rounding error below pi do not
    spill into a nonexistent bin.
    """
    if not math.isfinite(theta):
        raise InvalidInputError(f"theta must be finite, got {theta}")
    reduced = theta % math.pi
    return min(int(reduced / binning.bin_width), binning.n_bins - 1)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def extract_patch(scene: np.ndarray, center: tuple[float, float], size: int) -> np.ndarray:
    """Crop a size x size patch centered at ``center``, edge-replicating
    anything that falls outside the scene.

    The center is rounded to the nearest pixel; it must lie inside the
    scene bounds. ``size`` must be positive and even.
    """
    if size <= 0 or size % 2 != 0:
        raise InvalidInputError(f"patch size must be positive and even, got {size}")
    h, w = scene.shape[:2]
    cx = _round_half_up(float(center[0]))
    cy = _round_half_up(float(center[1]))
    if not (0 <= cx < w and 0 <= cy < h):
        raise InvalidInputError(
            f"patch center ({center[0]}, {center[1]}) outside scene {w}x{h}"
        )
    half = size // 2
    y0, y1 = cy - half, cy + half
    x0, x1 = cx - half, cx + half
    pad_top = max(0, -y0)
    pad_left = max(0, -x0)
    pad_bottom = max(0, y1 - h)
    pad_right = max(0, x1 - w)
    crop = scene[max(0, y0):min(h, y1), max(0, x0):min(w, x1)]
    if pad_top or pad_left or pad_bottom or pad_right:
        pad = ((pad_top, pad_bottom), (pad_left, pad_right)) + ((0, 0),) * (scene.ndim - 2)
        crop = np.pad(crop, pad, mode="edge")
    return np.ascontiguousarray(crop)


def clip_to_scene(x: float, y: float, scene_shape) -> tuple[float, float]:
    """Clamp a pixel coordinate into the valid index range of a scene."""
    h, w = scene_shape[:2]
    return (min(max(x, 0.0), w - 1.0), min(max(y, 0.0), h - 1.0))


def candidate_patches(
    scene: np.ndarray, center: tuple[float, float], size: int, d: float
) -> PatchSet:
    """Extract the nine-patch hypothesis set around ``center``.

    Offset centers that would leave the scene are clipped to the border
    before extraction, so the set is always well-defined for any in-scene
    commanded center.
    """
    offsets = patch_offsets(d)
    patches = []
    for dx, dy in offsets:
        px, py = clip_to_scene(center[0] + dx, center[1] + dy, scene.shape)
        patches.append(extract_patch(scene, (px, py), size))
    return PatchSet(patches=patches, offsets=offsets)
