"""Two-stage training for the marginalized grasp model.

Stage 1 trains the patch network alone on the center patch of each record,
treating the stored (noisy) label as if it belonged to the commanded
position. Stage 2 trains the patch network and the noise model jointly
through the marginalization operator, which is what lets the patch network
shed the label noise: the noise model routes probability mass toward the
hypothesis patch that was actually executed.

Skipping stage 1 (``cold_start``) is supported deliberately; with a random
patch network the noise model gets no signal about which hypothesis is
right, so it tends to stay near uniform and the joint model gains nothing
over the baseline. That failure mode is part of the model's story and is
exercised by tests rather than papered over.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .core import AngleBinning, discretize_angle, patch_offsets
from .errors import InvalidInputError
from .model import (
    ModelConfig,
    RobustGrasp,
    grasp_loss,
    marginalize,
    save_checkpoint,
    scene_to_nmn_input,
)
from .persistence import load_dataset_arrays

PATCH_ONEHOT = tuple(1.0 if i == 0 else 0.0 for i in range(9))
UNIFORM_DIST = tuple(1.0 / 9.0 for _ in range(9))


@dataclass
class TrainConfig:
    stage1_epochs: int = 5
    stage2_epochs: int = 25
    batch_size: int = 64
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    deterministic: bool = False
    threshold: float = 0.5
    train_path: str = ""
    heldout_path: str = ""

    def __post_init__(self):
        if self.stage1_epochs < 0:
            raise InvalidInputError("stage1_epochs must be >= 0")
        if self.stage2_epochs < 1:
            raise InvalidInputError("stage2_epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(d["betas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        kwargs["betas"] = tuple(kwargs["betas"])
        return cls(**kwargs)


class PreparedDataset:
    """A dataset loaded into memory and preprocessed for batching.

    Scenes are edge-padded once so hypothesis patches can be cut with plain
    slicing; the slice reproduces the on-demand extraction exactly (same
    clip to the scene, same round-half-up of the center).
    """

    def __init__(self, path, model_cfg: ModelConfig, verify: bool = True):
        arrays = load_dataset_arrays(path, verify=verify)
        self.manifest = arrays["manifest"]
        self.model_cfg = model_cfg
        self.x = arrays["x"]
        self.y = arrays["y"]
        self.theta = arrays["theta"]
        self.labels = arrays["success"]
        self.robot_id = arrays["robot_id"]
        self.scene_id = arrays["scene_id"]
        self.n = len(self.x)
        self.scene_size = self.manifest.scene_size
        if self.manifest.patch_size != model_cfg.patch_size:
            raise InvalidInputError(
                f"dataset patch_size {self.manifest.patch_size} != model patch_size "
                f"{model_cfg.patch_size}"
            )

        binning = AngleBinning(model_cfg.n_bins)
        self.bins = np.array(
            [discretize_angle(t, binning) for t in self.theta], dtype=np.int64
        )
        n_robots = model_cfg.n_robots
        if self.n and int(self.robot_id.max()) >= n_robots:
            raise InvalidInputError(
                f"dataset contains robot_id {int(self.robot_id.max())} but the model "
                f"has {n_robots} robots"
            )
        self.onehot = np.eye(n_robots, dtype=np.float32)[self.robot_id]
        self.loc = np.stack([self.x, self.y], axis=1).astype(np.float32)
        self.loc /= float(self.scene_size - 1)

        pad = model_cfg.patch_size
        self._pad = pad
        self.padded = {
            sid: np.pad(scene, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
            for sid, scene in arrays["scenes"].items()
        }
        self.scene_small = {
            sid: np.ascontiguousarray(
                scene_to_nmn_input(scene, model_cfg.nmn_input_size).transpose(2, 0, 1)
            )
            for sid, scene in arrays["scenes"].items()
        }
        self.offsets = patch_offsets(model_cfg.patch_d)

    def crop_patches(self, indices, center_only: bool = False) -> np.ndarray:
        """uint8 [B, K, S, S, 3] hypothesis patches for the given records."""
        offs = self.offsets[:1] if center_only else self.offsets
        size = self.model_cfg.patch_size
        half = size // 2
        pad = self._pad
        hi = float(self.scene_size - 1)
        out = np.empty((len(indices), len(offs), size, size, 3), dtype=np.uint8)
        for bi, i in enumerate(indices):
            sp = self.padded[int(self.scene_id[i])]
            for ki, (dx, dy) in enumerate(offs):
                cx = min(max(self.x[i] + dx, 0.0), hi)
                cy = min(max(self.y[i] + dy, 0.0), hi)
                x0 = int(math.floor(cx + 0.5)) - half + pad
                y0 = int(math.floor(cy + 0.5)) - half + pad
                out[bi, ki] = sp[y0:y0 + size, x0:x0 + size]
        return out

    def batch_tensors(self, indices, center_only: bool = False) -> dict:
        """Assemble one training batch as torch tensors."""
        idx = np.asarray(indices)
        patches = self.crop_patches(idx, center_only=center_only)
        patches = torch.from_numpy(
            np.ascontiguousarray(patches.transpose(0, 1, 4, 2, 3), dtype=np.float32)
        )
        patches = patches / 255.0 - 0.5
        scenes = torch.from_numpy(
            np.stack([self.scene_small[int(s)] for s in self.scene_id[idx]])
        )
        return {
            "patches": patches,
            "scenes": scenes,
            "onehot": torch.from_numpy(self.onehot[idx]),
            "loc": torch.from_numpy(self.loc[idx]),
            "bins": torch.from_numpy(self.bins[idx]),
            "labels": torch.from_numpy(self.labels[idx]),
        }


def iter_batches(data: PreparedDataset, batch_size: int, seed: int, epoch: int,
                 center_only: bool = False, shuffle: bool = True):
    """Deterministic epoch iterator: the permutation depends only on
    (seed, epoch), never on global RNG state."""
    if shuffle:
        order = np.random.default_rng([seed, 17, epoch]).permutation(data.n)
    else:
        order = np.arange(data.n)
    for start in range(0, data.n, batch_size):
        yield data.batch_tensors(order[start:start + batch_size], center_only=center_only)


def apply_determinism(cfg: TrainConfig):
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def build_model(model_cfg: ModelConfig, cfg: TrainConfig, variant: str = "robust") -> RobustGrasp:
    """Create a model with seeded initial weights.

    Variants: "robust" (learned noise model), "patch" (distribution frozen
    one-hot on the center patch, the noise-oblivious baseline), "uniform"
    (frozen uniform distribution, used by equivalence tests).
    """
    apply_determinism(cfg)
    torch.manual_seed(cfg.seed)
    if variant == "robust":
        frozen = None
    elif variant == "patch":
        frozen = PATCH_ONEHOT
    elif variant == "uniform":
        frozen = UNIFORM_DIST
    else:
        raise InvalidInputError(f"unknown model variant {variant!r}")
    return RobustGrasp(model_cfg, frozen_dist=frozen)


def _entropy(dist: torch.Tensor) -> torch.Tensor:
    p = dist.clamp_min(1e-12)
    return -(p * torch.log(p)).sum(dim=-1)


def train_stage1(model: RobustGrasp, data: PreparedDataset, cfg: TrainConfig,
                 out_dir=None) -> list:
    """Center-patch pretraining of the patch network; the noise model is
    untouched. Returns per-epoch history rows; with ``out_dir`` set a
    checkpoint is written after every epoch."""
    opt = torch.optim.Adam(model.gpn.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    history = []
    model.train()
    for epoch in range(cfg.stage1_epochs):
        tot_loss = 0.0
        n_correct = 0
        n_seen = 0
        for batch in iter_batches(data, cfg.batch_size, cfg.seed, epoch, center_only=True):
            probs = model.gpn.forward_single(batch["patches"][:, 0])
            loss = grasp_loss(probs, batch["bins"], batch["labels"])
            opt.zero_grad()
            loss.backward()
            opt.step()
            b = batch["labels"].shape[0]
            tot_loss += float(loss.detach()) * b
            p = probs.gather(1, batch["bins"].unsqueeze(1)).squeeze(1)
            n_correct += int(((p >= cfg.threshold) == (batch["labels"] >= 0.5)).sum())
            n_seen += b
        row = {
            "stage": 1, "epoch": epoch, "split": "train",
            "loss": tot_loss / max(n_seen, 1),
            "accuracy": n_correct / max(n_seen, 1),
        }
        history.append(row)
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / f"stage1_epoch{epoch:03d}.pt",
                            extra={"history_row": row})
    return history


def train_stage2(model: RobustGrasp, data: PreparedDataset, cfg: TrainConfig,
                 out_dir=None) -> list:
    """Joint training through the marginalization operator. With a frozen
    patch distribution only the patch network has gradients (the optimizer
    still sees the same parameter list so the two variants stay
    step-for-step comparable). Logs the mean entropy of the patch
    distribution each epoch; a collapse toward one hypothesis shows up as
    entropy near zero."""
    params = list(model.gpn.parameters())
    if model.frozen_dist is None:
        params += list(model.nmn.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas)
    history = []
    model.train()
    for epoch in range(cfg.stage2_epochs):
        tot_loss = 0.0
        tot_entropy = 0.0
        n_correct = 0
        n_seen = 0
        for batch in iter_batches(data, cfg.batch_size, cfg.seed, 1000 + epoch):
            dist = model.patch_dist(batch["scenes"], batch["onehot"], batch["loc"])
            marginal = marginalize(model.gpn(batch["patches"]), dist)
            loss = grasp_loss(marginal, batch["bins"], batch["labels"])
            opt.zero_grad()
            loss.backward()
            opt.step()
            b = batch["labels"].shape[0]
            tot_loss += float(loss.detach()) * b
            tot_entropy += float(_entropy(dist.detach()).sum())
            p = marginal.gather(1, batch["bins"].unsqueeze(1)).squeeze(1)
            n_correct += int(((p >= cfg.threshold) == (batch["labels"] >= 0.5)).sum())
            n_seen += b
        row = {
            "stage": 2, "epoch": epoch, "split": "train",
            "loss": tot_loss / max(n_seen, 1),
            "accuracy": n_correct / max(n_seen, 1),
            "nmn_entropy": tot_entropy / max(n_seen, 1),
        }
        history.append(row)
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / f"stage2_epoch{epoch:03d}.pt",
                            extra={"history_row": row})
    return history


def train_model(train_path, model_cfg: ModelConfig, cfg: TrainConfig,
                variant: str = "robust", cold_start: bool = False,
                out_dir=None, data: PreparedDataset | None = None):
    """Full pipeline: build, stage 1 (unless cold-started), stage 2.

    Returns (model, history). With ``out_dir`` set, also writes
    ``checkpoint.pt`` and ``metrics.jsonl`` there.
    """
    if data is None:
        data = PreparedDataset(train_path, model_cfg)
    model = build_model(model_cfg, cfg, variant=variant)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    if not cold_start:
        history += train_stage1(model, data, cfg, out_dir=out_dir)
    history += train_stage2(model, data, cfg, out_dir=out_dir)
    model.eval()
    if out_dir is not None:
        write_metrics(out_dir / "metrics.jsonl", history)
        save_checkpoint(model, out_dir / "checkpoint.pt", extra={
            "train_config": cfg.to_dict(),
            "variant": variant,
            "cold_start": cold_start,
            "robot_ids": list(data.manifest.robot_ids),
            "world_config": dict(data.manifest.world_config),
        })
    return model, history


def write_metrics(path, history):
    with open(path, "w", encoding="utf-8") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def check_disjoint(train_manifest, eval_manifest):
    """Hard error if the evaluation set shares scenes with the training set.

    Scene identity is the (seed, scene_index) pair plus the world-generation
    seed; sharing any pair means the same rendered scene appears in both."""
    if train_manifest is None or eval_manifest is None:
        return
    same_gen = train_manifest.world_config.get("seed") == eval_manifest.world_config.get("seed")
    a = {tuple(s) for s in train_manifest.scene_seeds}
    b = {tuple(s) for s in eval_manifest.scene_seeds}
    if same_gen and a & b:
        raise InvalidInputError(
            f"evaluation dataset shares {len(a & b)} scene(s) with the training set"
        )


@torch.no_grad()
def evaluate_binary(model: RobustGrasp, data: PreparedDataset, threshold: float = 0.5,
                    train_manifest=None) -> dict:
    """Held-out binary accuracy of the marginal probability at the executed
    angle bin, with a per-robot breakdown."""
    check_disjoint(train_manifest, data.manifest)
    model.eval()
    correct = np.zeros(data.n, dtype=bool)
    probs_all = np.zeros(data.n, dtype=np.float64)
    losses = np.zeros(data.n, dtype=np.float64)
    pos = 0
    for start in range(0, data.n, 256):
        idx = np.arange(start, min(start + 256, data.n))
        batch = data.batch_tensors(idx)
        dist = model.patch_dist(batch["scenes"], batch["onehot"], batch["loc"])
        marginal = marginalize(model.gpn(batch["patches"]), dist)
        p = marginal.gather(1, batch["bins"].unsqueeze(1)).squeeze(1)
        pred = (p >= threshold).numpy()
        truth = batch["labels"].numpy() >= 0.5
        correct[idx] = pred == truth
        pc = p.clamp(1e-7, 1 - 1e-7)
        lab = batch["labels"]
        losses[idx] = -(lab * torch.log(pc) + (1 - lab) * torch.log(1 - pc)).numpy()
        probs_all[idx] = p.numpy()
        pos += int(truth.sum())
    per_robot = {}
    for rid in sorted(set(int(r) for r in data.robot_id)):
        mask = data.robot_id == rid
        per_robot[rid] = float(correct[mask].mean()) if mask.any() else float("nan")
    return {
        "accuracy": float(correct.mean()) if data.n else float("nan"),
        "loss": float(losses.mean()) if data.n else float("nan"),
        "n": int(data.n),
        "positive_rate": pos / max(data.n, 1),
        "per_robot": per_robot,
    }


# ---------------------------------------------------------------------------
# Simulated grasp execution
# ---------------------------------------------------------------------------

def grasp_candidates(world, rng: np.random.Generator, n_jitter: int = 8,
                     jitter_sigma: float = 8.0, n_background: int = 2) -> list:
    """Candidate grasp centers for one world: each object's center plus
    jittered copies, plus a few random zone points. The jitter radius is
    comparable to the execution noise so a model that anticipates a
    displacement can pick a pre-compensated candidate."""
    x0, y0, x1, y1 = world.zone

    def _clip(p):
        return (min(max(p[0], x0), x1), min(max(p[1], y0), y1))

    out = []
    for obj in world.objects:
        out.append(_clip(obj.center))
        for _ in range(n_jitter):
            jx, jy = rng.normal(0.0, jitter_sigma, size=2)
            out.append(_clip((obj.center[0] + jx, obj.center[1] + jy)))
    for _ in range(n_background):
        out.append((float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))))
    return out


@torch.no_grad()
def evaluate_sim_grasping(model: RobustGrasp, worlds, seed: int = 0,
                          known_robot: bool = True, noiseless: bool = False) -> dict:
    """Top-1 grasp success over simulated worlds.

    For each world the model picks its best grasp among candidate centers,
    the grasp is executed with the noise of one fleet robot (cycled across
    worlds), and the oracle scores the executed pose. ``known_robot``
    controls whether the model is told which robot will execute;
    ``noiseless`` executes the commanded pose directly (an upper-bound
    probe).
    """
    from .simworld import execute_with_noise, oracle_grasp_success, render_scene

    worlds = list(worlds)
    if not worlds:
        raise InvalidInputError("worlds must be non-empty")
    model.eval()
    successes = []
    for i, world in enumerate(worlds):
        rng = np.random.default_rng([seed, i, 23])
        fleet_ids = sorted(world.noise)
        rid = fleet_ids[i % len(fleet_ids)]
        scene = render_scene(world)
        candidates = grasp_candidates(world, rng)
        from .model import predict_best_grasp

        grasp = predict_best_grasp(model, scene, candidates,
                                   robot_id=rid if known_robot else None)
        executed = grasp if noiseless else execute_with_noise(grasp, world.noise[rid])
        successes.append(bool(oracle_grasp_success(world, executed)))
    return {
        "success_rate": float(np.mean(successes)),
        "per_world": successes,
        "n_worlds": len(worlds),
    }


def random_policy_floor(worlds, seed: int = 0, n_rollouts: int = 20) -> dict:
    """Success rate of a random policy on the same candidate sets: uniform
    candidate choice, uniform angle, executed with the same robot cycling
    as the model evaluation."""
    from .simworld import execute_with_noise, oracle_grasp_success

    worlds = list(worlds)
    if not worlds:
        raise InvalidInputError("worlds must be non-empty")
    from .core import GraspConfig

    rates = []
    for i, world in enumerate(worlds):
        rng = np.random.default_rng([seed, i, 23])
        fleet_ids = sorted(world.noise)
        rid = fleet_ids[i % len(fleet_ids)]
        candidates = grasp_candidates(world, rng)
        wins = 0
        for _ in range(n_rollouts):
            cx, cy = candidates[int(rng.integers(len(candidates)))]
            grasp = GraspConfig(x=cx, y=cy, theta=float(rng.uniform(0.0, math.pi)))
            executed = execute_with_noise(grasp, world.noise[rid])
            if oracle_grasp_success(world, executed):
                wins += 1
        rates.append(wins / n_rollouts)
    return {"success_rate": float(np.mean(rates)), "per_world": rates}
