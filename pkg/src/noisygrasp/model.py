"""Grasp prediction network, noise modelling network, and their marginalized
combination.

The grasp prediction network (GPN) maps an image patch to independent
per-angle-bin success probabilities (sigmoid outputs). The noise modelling
network (NMN) maps robot context (a downsampled scene image, the robot ID
one-hot, and the normalized pixel location of the grasp) to a nine-way
distribution over which candidate patch was actually executed. The
marginalization operator takes the expectation of the GPN rows under the
NMN distribution; training applies binary cross entropy to that marginal at
the executed angle bin.

Freezing the NMN to a one-hot on the center patch reduces the model exactly
to the noise-oblivious baseline ("patch" variant); that reduction is a
tested invariant, not an accident.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    AngleBinning,
    GraspConfig,
    PatchSet,
    RobotContext,
    candidate_patches,
    patch_offsets,
)
from .errors import InvalidInputError, ShapeError, UnsupportedVersionError

N_PATCHES = 9
CHECKPOINT_VERSION = 1
BCE_EPS = 1e-7


@dataclass
class ModelConfig:
    n_bins: int = 18
    patch_size: int = 64
    patch_d: float = 16.0
    n_robots: int = 4
    feature_dim: int = 64
    scene_size: int = 256
    nmn_input_size: int = 64
    nmn_hidden: int = 64
    conv_channels: tuple = (16, 32, 64)
    # side of the pooled feature grid kept before the projection; grasp
    # success depends on where edges sit relative to the patch center, so
    # collapsing to 1x1 throws away the signal
    pool_grid: int = 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(d["conv_channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = dict(d)
        kwargs["conv_channels"] = tuple(kwargs["conv_channels"])
        return cls(**kwargs)

    @property
    def binning(self) -> AngleBinning:
        return AngleBinning(self.n_bins)


class ConvBackbone(nn.Module):
    """Small convolutional feature extractor: stride-4 stem, two stride-2
    convs, average pool to a fixed small grid, linear projection to the
    feature dim. The pooled grid keeps coarse spatial layout, which the
    per-bin success prediction needs."""

    def __init__(self, channels: tuple, feature_dim: int, pool_grid: int = 4):
        super().__init__()
        c1, c2, c3 = channels
        self.conv1 = nn.Conv2d(3, c1, kernel_size=5, stride=4, padding=2)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, kernel_size=3, stride=2, padding=1)
        self.pool_grid = pool_grid
        self.proj = nn.Linear(c3 * pool_grid * pool_grid, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        x = F.adaptive_avg_pool2d(x, self.pool_grid).flatten(1)
        return F.relu(self.proj(x))


class GPN(nn.Module):
    """Shared-weight patch network: one patch in, per-bin probabilities out."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = ConvBackbone(cfg.conv_channels, cfg.feature_dim, cfg.pool_grid)
        self.head = nn.Linear(cfg.feature_dim, cfg.n_bins)
        self.n_bins = cfg.n_bins
        self.patch_size = cfg.patch_size

    def forward_single(self, patches: torch.Tensor) -> torch.Tensor:
        """[B, 3, S, S] -> [B, n_bins] sigmoid probabilities."""
        if patches.ndim != 4 or patches.shape[1] != 3:
            raise ShapeError(f"expected [B, 3, S, S] patches, got {tuple(patches.shape)}")
        return torch.sigmoid(self.head(self.backbone(patches)))

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """[B, 9, 3, S, S] -> [B, 9, n_bins]; the same network is applied to
        every patch independently."""
        if patches.ndim != 5 or patches.shape[1] != N_PATCHES:
            raise ShapeError(
                f"expected [B, {N_PATCHES}, 3, S, S] patch stack, got {tuple(patches.shape)}"
            )
        b = patches.shape[0]
        flat = patches.reshape(b * N_PATCHES, *patches.shape[2:])
        return self.forward_single(flat).reshape(b, N_PATCHES, self.n_bins)


class NMN(nn.Module):
    """Noise model: robot context in, nine-way patch distribution out.

    By the conditional-independence assumption the executed angle bin and
    the local patch are NOT inputs; only scene-level context is.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = ConvBackbone(cfg.conv_channels, cfg.feature_dim, cfg.pool_grid)
        in_dim = cfg.feature_dim + cfg.n_robots + 2
        h = cfg.nmn_hidden
        self.fc1 = nn.Linear(in_dim, h)
        self.fc2 = nn.Linear(h, h)
        self.fc3 = nn.Linear(h, N_PATCHES)
        self.n_robots = cfg.n_robots

    def forward(self, scenes: torch.Tensor, robot_onehot: torch.Tensor,
                locations: torch.Tensor) -> torch.Tensor:
        """scenes [B, 3, s, s], robot_onehot [B, R], locations [B, 2] in
        [0, 1]; returns [B, 9] softmax distributions."""
        if robot_onehot.shape[-1] != self.n_robots:
            raise ShapeError(
                f"robot one-hot width {robot_onehot.shape[-1]} != n_robots {self.n_robots}"
            )
        feat = self.backbone(scenes)
        x = torch.cat([feat, robot_onehot, locations], dim=1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return torch.softmax(self.fc3(x), dim=-1)


def marginalize(gpn_probs: torch.Tensor, nmn_dist: torch.Tensor) -> torch.Tensor:
    """Expectation of GPN rows under the NMN distribution.

    gpn_probs [..., 9, N] and nmn_dist [..., 9] -> [..., N]. Each output
    entry is a convex combination of the corresponding column of gpn_probs,
    so it stays inside [min_j, max_j] for that bin.
    """
    gpn_probs = torch.as_tensor(gpn_probs)
    nmn_dist = torch.as_tensor(nmn_dist)
    if gpn_probs.shape[-2] != N_PATCHES or nmn_dist.shape[-1] != N_PATCHES:
        raise ShapeError(
            f"expected [..., {N_PATCHES}, N] probs and [..., {N_PATCHES}] dist, got "
            f"{tuple(gpn_probs.shape)} and {tuple(nmn_dist.shape)}"
        )
    if gpn_probs.shape[:-2] != nmn_dist.shape[:-1]:
        raise ShapeError("batch shapes of gpn_probs and nmn_dist do not match")
    return (nmn_dist.unsqueeze(-1) * gpn_probs).sum(dim=-2)


def grasp_loss(marginal: torch.Tensor, executed_bin, label) -> torch.Tensor:
    """Binary cross entropy between the marginal probability at the executed
    angle bin and the grasp label; probabilities are clamped away from 0/1.

    Accepts a single N-vector with scalar bin/label, or a [B, N] batch with
    length-B index and label vectors (mean reduction).
    """
    marginal = torch.as_tensor(marginal)
    single = marginal.ndim == 1
    if single:
        marginal = marginal.unsqueeze(0)
    bins = torch.as_tensor(executed_bin, dtype=torch.long).reshape(-1)
    labels = torch.as_tensor(label, dtype=marginal.dtype).reshape(-1)
    n_bins = marginal.shape[-1]
    if bins.min() < 0 or bins.max() >= n_bins:
        raise InvalidInputError(
            f"executed bin out of range [0, {n_bins}): {bins.min()}..{bins.max()}"
        )
    p = marginal.gather(1, bins.unsqueeze(1)).squeeze(1)
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    loss = -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p))
    return loss.mean()


class RobustGrasp(nn.Module):
    """GPN and NMN tied together by the marginalization operator.

    When ``frozen_dist`` is set the NMN is bypassed and the fixed
    distribution is used instead; a one-hot on index 0 makes the model the
    plain noise-oblivious patch baseline, exactly.
    """

    def __init__(self, cfg: ModelConfig, frozen_dist=None):
        super().__init__()
        self.cfg = cfg
        self.gpn = GPN(cfg)
        self.nmn = NMN(cfg)
        if frozen_dist is not None:
            frozen_dist = torch.as_tensor(frozen_dist, dtype=torch.float32)
            if frozen_dist.shape != (N_PATCHES,):
                raise ShapeError("frozen_dist must have shape (9,)")
        self.frozen_dist = frozen_dist

    @property
    def offsets(self) -> list:
        return patch_offsets(self.cfg.patch_d)

    def patch_dist(self, scenes, robot_onehot, locations) -> torch.Tensor:
        if self.frozen_dist is not None:
            b = scenes.shape[0]
            return self.frozen_dist.to(scenes.dtype).unsqueeze(0).expand(b, N_PATCHES)
        return self.nmn(scenes, robot_onehot, locations)

    def forward(self, patches, scenes, robot_onehot, locations) -> torch.Tensor:
        """Marginalized per-bin success probabilities, [B, N]."""
        return marginalize(self.gpn(patches), self.patch_dist(scenes, robot_onehot, locations))


# ---------------------------------------------------------------------------
# Image preprocessing
# ---------------------------------------------------------------------------

def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 HWC -> float32 CHW in [-0.5, 0.5]."""
    arr = np.ascontiguousarray(img, dtype=np.float32) / 255.0 - 0.5
    return torch.from_numpy(arr).permute(2, 0, 1)


def scene_to_nmn_input(scene: np.ndarray, size: int) -> np.ndarray:
    """Downsample a scene raster to the NMN input resolution (block mean when
    the sizes divide evenly, adaptive pooling otherwise). Returns float32
    HWC in [-0.5, 0.5]."""
    h, w = scene.shape[:2]
    arr = scene.astype(np.float32) / 255.0 - 0.5
    if h == size and w == size:
        return arr
    if h % size == 0 and w % size == 0:
        fy, fx = h // size, w // size
        return arr.reshape(size, fy, size, fx, 3).mean(axis=(1, 3))
    t = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
    out = F.adaptive_avg_pool2d(t, size)
    return out.squeeze(0).permute(1, 2, 0).numpy()


def normalize_location(x: float, y: float, scene_size: int) -> tuple[float, float]:
    return (x / (scene_size - 1.0), y / (scene_size - 1.0))


# ---------------------------------------------------------------------------
# Single-sample prediction helpers
# ---------------------------------------------------------------------------

def gpn_forward(model: RobustGrasp, patches) -> np.ndarray:
    """Run the GPN over one nine-patch hypothesis set; returns a 9 x N array."""
    if isinstance(patches, PatchSet):
        patches = patches.patches
    if len(patches) != N_PATCHES:
        raise ShapeError(f"expected {N_PATCHES} patches, got {len(patches)}")
    stack = torch.stack([image_to_tensor(p) for p in patches]).unsqueeze(0)
    with torch.no_grad():
        return model.gpn(stack)[0].numpy()


def nmn_forward(model: RobustGrasp, context: RobotContext) -> np.ndarray:
    """Run the NMN on one robot context; returns the nine-way distribution."""
    cfg = model.cfg
    onehot = torch.from_numpy(context.one_hot(cfg.n_robots)).unsqueeze(0)
    small = scene_to_nmn_input(context.scene_image, cfg.nmn_input_size)
    scenes = torch.from_numpy(small).permute(2, 0, 1).unsqueeze(0)
    loc = normalize_location(*context.pixel_location, context.scene_image.shape[1])
    locs = torch.tensor([loc], dtype=torch.float32)
    with torch.no_grad():
        return model.nmn(scenes, onehot, locs)[0].numpy()


def _mixture_patch_dist(model: RobustGrasp, scene: np.ndarray, location,
                        robot_id: int | None) -> np.ndarray:
    """NMN distribution for a known robot, or the uniform mixture over all
    trained robots when the executing robot is unknown."""
    if model.frozen_dist is not None:
        return model.frozen_dist.numpy()
    if robot_id is not None:
        ctx = RobotContext(robot_id=robot_id, pixel_location=location, scene_image=scene)
        return nmn_forward(model, ctx)
    dists = [
        nmn_forward(
            model,
            RobotContext(robot_id=r, pixel_location=location, scene_image=scene),
        )
        for r in range(model.cfg.n_robots)
    ]
    return np.mean(dists, axis=0)


def predict_best_grasp(model: RobustGrasp, scene: np.ndarray, candidate_centers,
                       robot_id: int | None = None) -> GraspConfig:
    """Pick the (center, angle-bin) pair maximizing the marginalized success
    probability; ties break toward the lowest (center index, bin index).

    With ``robot_id=None`` the patch distribution is averaged over all
    trained robots (the executing robot is unknown at deployment time).
    """
    centers = list(candidate_centers)
    if not centers:
        raise InvalidInputError("candidate_centers must be non-empty")
    cfg = model.cfg
    binning = cfg.binning
    best = None
    for ci, center in enumerate(centers):
        pset = candidate_patches(scene, center, cfg.patch_size, cfg.patch_d)
        probs = gpn_forward(model, pset)
        dist = _mixture_patch_dist(model, scene, tuple(center), robot_id)
        marginal = (dist[:, None] * probs).sum(axis=0)
        bi = int(np.argmax(marginal))
        score = float(marginal[bi])
        if best is None or score > best[0]:
            best = (score, ci, bi)
    _, ci, bi = best
    cx, cy = centers[ci]
    return GraspConfig(x=float(cx), y=float(cy), theta=binning.bin_center(bi))


def noise_correction_field(model: RobustGrasp, scene: np.ndarray, robot_id: int,
                           grid) -> list:
    """For each probe pixel, the offset of the NMN's argmax hypothesis patch.

    ``grid`` is either an int n (an n x n uniform grid over the scene) or an
    iterable of (x, y) pixels. Returns [((x, y), (dx, dy)), ...].
    """
    if isinstance(grid, int):
        size = scene.shape[0]
        coords = np.linspace(size * 0.1, size * 0.9, grid)
        points = [(float(x), float(y)) for y in coords for x in coords]
    else:
        points = [(float(x), float(y)) for x, y in grid]
    offsets = model.offsets
    out = []
    for (x, y) in points:
        ctx = RobotContext(robot_id=robot_id, pixel_location=(x, y), scene_image=scene)
        dist = nmn_forward(model, ctx)
        j = int(np.argmax(dist))
        out.append(((x, y), offsets[j]))
    return out


def nmn_entropy(dist) -> float:
    """Shannon entropy in nats of a patch distribution."""
    p = np.asarray(dist, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: RobustGrasp, path, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "gpn_state": model.gpn.state_dict(),
        "nmn_state": model.nmn.state_dict(),
        "frozen_dist": None if model.frozen_dist is None else model.frozen_dist.tolist(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[RobustGrasp, dict]:
    payload = torch.load(path, weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} not supported (reader is {CHECKPOINT_VERSION})"
        )
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = RobustGrasp(cfg, frozen_dist=payload["frozen_dist"])
    model.gpn.load_state_dict(payload["gpn_state"])
    model.nmn.load_state_dict(payload["nmn_state"])
    model.eval()
    return model, payload["extra"]
