"""Scripted data-collection agent for the simulated grasping world.

One episode runs a detect / decide / act loop against a single world. At
each step the agent detects object candidates, splits them into near (within
reach of the current base position) and far, and with probability
``eps_near`` grasps a reachable near candidate, otherwise relocates toward a
far one. Grasp attempts are labelled through the noisy-execution pipeline and
successfully grasped objects are removed from the world. The base and every
commanded grasp stay inside the workspace zone; episodes end when nothing is
detected or when the step budget runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import GraspConfig
from .errors import InvalidInputError
from .simworld import WorldState, label_grasp, render_scene

EXIT_NO_OBJECTS = "no_objects"
EXIT_MAX_STEPS = "max_steps"


@dataclass(frozen=True)
class Detection:
    """One detector candidate: a pixel location and a confidence score."""

    x: float
    y: float
    score: float = 1.0

    @property
    def position(self) -> tuple:
        return (self.x, self.y)


@dataclass
class CollectionConfig:
    eps_near: float = 0.8
    reach_radius: float = 64.0
    max_steps: int = 40
    patch_size: int = 64
    detect_jitter: float = 2.0
    miss_rate: float = 0.05
    false_positive_rate: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.eps_near <= 1.0:
            raise InvalidInputError(f"eps_near must be in [0, 1], got {self.eps_near}")
        if self.max_steps < 1:
            raise InvalidInputError("max_steps must be >= 1")


@dataclass
class EpisodeResult:
    records: list
    trace: list
    exit_reason: str
    # "near"/"far" picks taken at steps where both options were available
    decisions: list = field(default_factory=list)


def in_zone(x: float, y: float, zone: tuple) -> bool:
    x0, y0, x1, y1 = zone
    return x0 <= x <= x1 and y0 <= y <= y1


def clip_to_zone(x: float, y: float, zone: tuple) -> tuple:
    x0, y0, x1, y1 = zone
    return (min(max(x, x0), x1), min(max(y, y0), y1))


def feasible(x: float, y: float, zone: tuple, base: tuple, reach_radius: float) -> bool:
    """A grasp target is feasible when it lies inside the workspace zone and
    within reach of the current base position."""
    return in_zone(x, y, zone) and math.dist((x, y), base) <= reach_radius


def oracle_detector(world: WorldState, cfg: CollectionConfig,
                    rng: np.random.Generator) -> list:
    """Imperfect detector built on ground truth: true object centers with
    Gaussian pixel jitter, independent per-view misses, and occasional false
    positives inside the zone."""
    out = []
    for obj in world.objects:
        if rng.random() < cfg.miss_rate:
            continue
        jx, jy = rng.normal(0.0, cfg.detect_jitter, size=2)
        x, y = clip_to_zone(obj.center[0] + jx, obj.center[1] + jy, world.zone)
        out.append(Detection(x=float(x), y=float(y), score=float(rng.uniform(0.7, 1.0))))
    if rng.random() < cfg.false_positive_rate:
        x0, y0, x1, y1 = world.zone
        out.append(Detection(x=float(rng.uniform(x0, x1)), y=float(rng.uniform(y0, y1)),
                             score=float(rng.uniform(0.1, 0.5))))
    return out


# ---------------------------------------------------------------------------
# Grasp policies
# ---------------------------------------------------------------------------

class RandomPolicy:
    """Grasp at the detection with a uniformly random angle."""

    def __call__(self, scene, detection: Detection, rng: np.random.Generator) -> GraspConfig:
        return GraspConfig(x=detection.x, y=detection.y,
                           theta=float(rng.uniform(0.0, math.pi)))


class ModelPolicy:
    """Grasp with a trained model's best prediction near the detection."""

    def __init__(self, model, robot_id: int | None = None):
        self.model = model
        self.robot_id = robot_id

    def __call__(self, scene, detection: Detection, rng: np.random.Generator) -> GraspConfig:
        from .model import predict_best_grasp

        return predict_best_grasp(self.model, scene, [detection.position],
                                  robot_id=self.robot_id)


def _nearest_object_index(world: WorldState, position: tuple) -> int | None:
    if not world.objects:
        return None
    dists = [math.dist(position, obj.center) for obj in world.objects]
    return int(np.argmin(dists))


def run_episode(world: WorldState, robot_id: int, cfg: CollectionConfig,
                rng: np.random.Generator, policy=None) -> EpisodeResult:
    """Run the detect / decide / act loop on one world until nothing is
    detected or the step budget is exhausted. All grasps are executed (and
    noise-labelled) by the given robot.

    Returns the labelled grasp records, a per-step trace (base position,
    decision, detection counts, feasibility skips, grasp outcomes), the exit
    reason, and the near/far decisions taken when both options existed.
    """
    if policy is None:
        policy = RandomPolicy()
    if robot_id not in world.noise:
        raise InvalidInputError(f"robot_id {robot_id} not in world fleet")
    x0, y0, x1, y1 = world.zone
    base = ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    # episode owns a mutable object list so successes remove objects
    world = replace(world, objects=list(world.objects))
    scene = render_scene(world)

    records = []
    trace = []
    decisions = []
    exit_reason = EXIT_MAX_STEPS

    for step in range(cfg.max_steps):
        detections = oracle_detector(world, cfg, rng)
        entry = {
            "step": step,
            "base": base,
            "n_detections": len(detections),
            "decision": None,
            "skipped_infeasible": 0,
            "grasp": None,
        }
        if not detections:
            trace.append(entry)
            exit_reason = EXIT_NO_OBJECTS
            break

        near = [d for d in detections if math.dist(d.position, base) <= cfg.reach_radius]
        far = [d for d in detections if math.dist(d.position, base) > cfg.reach_radius]

        if near and far:
            go_near = rng.random() < cfg.eps_near
            decisions.append("near" if go_near else "far")
        else:
            go_near = bool(near)

        if go_near:
            reachable = [d for d in near if feasible(*d.position, world.zone, base,
                                                     cfg.reach_radius)]
            entry["skipped_infeasible"] = len(near) - len(reachable)
            if reachable:
                entry["decision"] = "near"
                target = reachable[int(rng.integers(len(reachable)))]
                commanded = policy(scene, target, rng)
                cx, cy = clip_to_zone(commanded.x, commanded.y, world.zone)
                commanded = GraspConfig(x=cx, y=cy, theta=commanded.theta)
                record = label_grasp(world, commanded, robot_id, cfg.patch_size, scene=scene)
                records.append(record)
                entry["grasp"] = {
                    "x": commanded.x, "y": commanded.y, "theta": commanded.theta,
                    "success": record.success,
                }
                if record.success:
                    hit = _nearest_object_index(world, (commanded.x, commanded.y))
                    if hit is not None:
                        world.objects.pop(hit)
                        scene = render_scene(world)
                trace.append(entry)
                continue
            go_near = False  # nothing reachable, fall through to relocation

        if far:
            entry["decision"] = "far"
            target = far[int(rng.integers(len(far)))]
            jitter = rng.normal(0.0, 4.0, size=2)
            base = clip_to_zone(target.x + jitter[0], target.y + jitter[1], world.zone)
            trace.append(entry)
            continue

        # near detections exist but none are feasible and there is nowhere
        # to relocate toward; nudge the base randomly inside the zone
        entry["decision"] = "stuck"
        base = clip_to_zone(base[0] + rng.normal(0.0, cfg.reach_radius / 2.0),
                            base[1] + rng.normal(0.0, cfg.reach_radius / 2.0),
                            world.zone)
        trace.append(entry)

    return EpisodeResult(records=records, trace=trace, exit_reason=exit_reason,
                         decisions=decisions)


def collect_records(worlds, cfg: CollectionConfig, seed: int, policy=None) -> tuple:
    """Run one episode per world, cycling robots, and pool the records.

    Returns (records, episode_results). Episode i uses robot i mod fleet
    size and an independent seed substream.
    """
    all_records = []
    results = []
    for i, world in enumerate(worlds):
        fleet_ids = sorted(world.noise)
        if not fleet_ids:
            raise InvalidInputError("world fleet must contain at least one robot")
        rng = np.random.default_rng([seed, i, 11])
        robot_id = fleet_ids[i % len(fleet_ids)]
        result = run_episode(world, robot_id, cfg, rng, policy=policy)
        all_records.extend(result.records)
        results.append(result)
    return all_records, results
