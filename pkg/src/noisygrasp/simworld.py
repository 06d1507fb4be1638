"""Synthetic planar grasping world with per-robot structured execution noise.

A world is a textured 2D scene of oriented rectangular objects. A grasp
succeeds when its point lands inside an object footprint shrunk by a margin
and its angle is roughly perpendicular to that object's major axis. Each
robot carries a fixed, smooth, position-dependent displacement between the
commanded and executed grasp position; labels are computed at the executed
position but stored against the commanded one, which is exactly the
label/position mismatch the learner has to undo.

Everything here is a pure function of (config, seed): identical inputs give
bit-identical scenes, noise fields, and datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .core import (
    GraspConfig,
    GraspRecord,
    RobotContext,
    clip_to_scene,
    extract_patch,
)
from .errors import InvalidInputError

# Polynomial displacement-field terms in normalized coords (x, y in [-0.5, 0.5]):
# [x, y, x*y, x^2, y^2]. The constant term is the per-robot offset vector.
N_FIELD_TERMS = 5

# width of the darkened rim drawn inside each object footprint
OUTLINE_PX = 2.5


@dataclass(frozen=True)
class SimObject:
    """Oriented rectangle footprint: center, major-axis angle, half extents."""

    center: tuple[float, float]
    major_axis_angle: float
    half_extents: tuple[float, float]  # (a, b) with a >= b
    texture_id: int

    def to_local(self, x: float, y: float) -> tuple[float, float]:
        """Rotate a scene point into the object frame (u along major axis)."""
        c, s = math.cos(self.major_axis_angle), math.sin(self.major_axis_angle)
        dx, dy = x - self.center[0], y - self.center[1]
        return (c * dx + s * dy, -s * dx + c * dy)

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        u, v = self.to_local(x, y)
        a, b = self.half_extents
        return abs(u) <= a - margin and abs(v) <= b - margin


@dataclass(frozen=True)
class NoiseTransform:
    """Structured execution noise for one robot.

    The displacement applied to a commanded position p is
    (A - I) p + b + field(p), capped at Euclidean norm max_noise. ``field``
    is a low-order polynomial in normalized pixel coordinates so the noise
    varies smoothly over the scene.
    """

    robot_id: int
    affine: tuple  # 2x2 row-major
    offset: tuple[float, float]
    field_coeffs: tuple  # 2 x N_FIELD_TERMS, row-major
    max_noise: float
    scene_size: int

    def __post_init__(self):
        a = np.asarray(self.affine, dtype=float).reshape(2, 2)
        if abs(np.linalg.det(a)) < 1e-9:
            raise InvalidInputError("noise affine must be invertible")

    def displacement(self, x: float, y: float) -> tuple[float, float]:
        a = np.asarray(self.affine, dtype=float).reshape(2, 2)
        cf = np.asarray(self.field_coeffs, dtype=float).reshape(2, N_FIELD_TERMS)
        xn = x / self.scene_size - 0.5
        yn = y / self.scene_size - 0.5
        terms = np.array([xn, yn, xn * yn, xn * xn, yn * yn])
        dx = (a[0, 0] - 1.0) * x + a[0, 1] * y + self.offset[0] + float(cf[0] @ terms)
        dy = a[1, 0] * x + (a[1, 1] - 1.0) * y + self.offset[1] + float(cf[1] @ terms)
        norm = math.hypot(dx, dy)
        if norm > self.max_noise:
            scale = self.max_noise / norm
            dx, dy = dx * scale, dy * scale
        return (dx, dy)


@dataclass
class WorldState:
    """Ground truth for one scene: objects, per-robot noise, zone, seed."""

    scene_size: int
    objects: list
    background_texture: int
    noise: dict
    zone: tuple[float, float, float, float]  # x0, y0, x1, y1
    rng_seed: int
    margin: float = 4.0
    angle_tolerance: float = math.radians(15.0)


@dataclass
class WorldConfig:
    """Flat configuration for world generation, noise, and grasp sampling."""

    scene_size: int = 256
    n_robots: int = 4
    max_noise: float = 12.0
    noise_seed: int = 0
    offset_norm_lo: float = 0.75   # fraction of max_noise
    offset_norm_hi: float = 0.9
    affine_eps: float = 0.004
    field_amp: float = 1.5
    margin: float = 4.0
    angle_tol_deg: float = 15.0
    objects_min: int = 3
    objects_max: int = 6
    half_extent_a: tuple[float, float] = (16.0, 32.0)
    half_extent_b: tuple[float, float] = (11.0, 20.0)
    textures: tuple = (0, 1, 2, 3, 4, 5, 6, 7)
    zone_margin: float = 16.0
    patch_size: int = 64
    patch_d: float = 16.0
    grasps_per_scene: int = 50
    # sampling mix tuned so the empirical positive-label rate of generated
    # datasets sits inside [0.3, 0.5] while execution noise still flips a
    # large label fraction (~0.25)
    bg_frac: float = 0.08
    inside_frac: float = 0.65
    angle_near_frac: float = 0.8
    angle_window_factor: float = 1.1
    edge_band: float = 8.0
    seed: int = 0

    @property
    def angle_tolerance(self) -> float:
        return math.radians(self.angle_tol_deg)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("half_extent_a", "half_extent_b", "textures"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        kwargs = dict(d)
        for key in ("half_extent_a", "half_extent_b", "textures"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Textures
# ---------------------------------------------------------------------------

def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array([int(c * 255) for c in rgb], dtype=np.uint8)


def texture_image(texture_id: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural texture: pattern kind and palette derived from the id,
    phases and spacings from the supplied rng stream."""
    hue = (texture_id * 0.381966) % 1.0
    c1 = _hsv_to_rgb(hue, 0.55, 0.82)
    c2 = _hsv_to_rgb((hue + 0.23) % 1.0, 0.5, 0.45)
    yy, xx = np.mgrid[0:h, 0:w]
    kind = texture_id % 5
    if kind == 0:  # stripes
        period = rng.integers(8, 17)
        ang = rng.uniform(0, math.pi)
        wave = (xx * math.cos(ang) + yy * math.sin(ang)) / period
        mask = (np.floor(wave) % 2).astype(bool)
    elif kind == 1:  # checker
        period = rng.integers(8, 17)
        mask = (((xx // period) + (yy // period)) % 2).astype(bool)
    elif kind == 2:  # dots
        period = rng.integers(10, 19)
        r = period * 0.3
        mask = ((xx % period - period / 2) ** 2 + (yy % period - period / 2) ** 2) < r * r
    elif kind == 3:  # smoothed noise
        coarse = rng.random((h // 8 + 1, w // 8 + 1))
        mask = np.kron(coarse, np.ones((8, 8)))[:h, :w] > 0.5
    else:  # diagonal gradient bands
        period = rng.integers(24, 41)
        wave = np.sin((xx + 2.0 * yy) * (2 * math.pi / period))
        mask = wave > 0
    img = np.where(mask[..., None], c1[None, None, :], c2[None, None, :])
    return img.astype(np.uint8)


# ---------------------------------------------------------------------------
# Fleet and world construction
# ---------------------------------------------------------------------------

def make_fleet(cfg: WorldConfig) -> dict:
    """Draw one NoiseTransform per robot.

    Directions of the constant offsets are evenly spaced starting from a
    random phase; for an even robot count the second half of the fleet gets
    the exact negation of the first half's direction vectors, so opposite
    robots exist by construction.
    """
    rng = np.random.default_rng([cfg.noise_seed, 977])
    phase = rng.uniform(0, 2 * math.pi)
    n = cfg.n_robots
    dirs = []
    half = n // 2
    for r in range(n):
        if n % 2 == 0 and r >= half:
            ux, uy = dirs[r - half]
            dirs.append((-ux, -uy))
        else:
            ang = phase + 2 * math.pi * r / n
            dirs.append((math.cos(ang), math.sin(ang)))
    fleet = {}
    for r in range(n):
        rho = rng.uniform(cfg.offset_norm_lo, cfg.offset_norm_hi) * cfg.max_noise
        eps = cfg.affine_eps
        affine = (np.eye(2) + rng.uniform(-eps, eps, size=(2, 2))).reshape(-1)
        coeffs = rng.uniform(-cfg.field_amp, cfg.field_amp, size=2 * N_FIELD_TERMS)
        fleet[r] = NoiseTransform(
            robot_id=r,
            affine=tuple(float(v) for v in affine),
            offset=(rho * dirs[r][0], rho * dirs[r][1]),
            field_coeffs=tuple(float(v) for v in coeffs),
            max_noise=cfg.max_noise,
            scene_size=cfg.scene_size,
        )
    return fleet


def _sample_objects(cfg: WorldConfig, rng: np.random.Generator) -> list:
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    object_textures = [t for t in cfg.textures]
    objects = []
    for _ in range(n):
        a = rng.uniform(*cfg.half_extent_a)
        b = min(rng.uniform(*cfg.half_extent_b), a)
        phi = rng.uniform(0, math.pi)
        rad = math.hypot(a, b)
        lo, hi = rad + 2.0, cfg.scene_size - rad - 2.0
        placed = None
        for _attempt in range(40):
            cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)
            ok = all(
                math.hypot(cx - o.center[0], cy - o.center[1])
                >= 0.9 * (rad + math.hypot(*o.half_extents))
                for o in objects
            )
            placed = (cx, cy)
            if ok:
                break
        tex = int(object_textures[int(rng.integers(0, len(object_textures)))])
        objects.append(
            SimObject(center=placed, major_axis_angle=phi, half_extents=(a, b), texture_id=tex)
        )
    return objects


def make_world(cfg: WorldConfig, scene_index: int) -> WorldState:
    """Build one scene; its rng stream depends only on (cfg.seed, scene_index)
    so parallel and serial generation agree."""
    rng = np.random.default_rng([cfg.seed, scene_index])
    bg = int(cfg.textures[int(rng.integers(0, len(cfg.textures)))])
    objects = _sample_objects(cfg, rng)
    zm = cfg.zone_margin
    zone = (zm, zm, cfg.scene_size - zm, cfg.scene_size - zm)
    return WorldState(
        scene_size=cfg.scene_size,
        objects=objects,
        background_texture=bg,
        noise=make_fleet(cfg),
        zone=zone,
        rng_seed=int(rng.integers(0, 2**31 - 1)),
        margin=cfg.margin,
        angle_tolerance=cfg.angle_tolerance,
    )


# ---------------------------------------------------------------------------
# Rendering and the grasp oracle
# ---------------------------------------------------------------------------

def render_scene(world: WorldState) -> np.ndarray:
    """Deterministic RGB raster: textured background, objects painted over
    in list order. Objects get a dark outline and a shaded interior so their
    silhouettes read regardless of which textures the scene draws; grasp
    success hinges on edge geometry, which must survive a texture swap."""
    size = world.scene_size
    rng = np.random.default_rng([world.rng_seed, 1])
    img = texture_image(world.background_texture, size, size, rng)
    yy, xx = np.mgrid[0:size, 0:size]
    for obj in world.objects:
        c, s = math.cos(obj.major_axis_angle), math.sin(obj.major_axis_angle)
        dx, dy = xx - obj.center[0], yy - obj.center[1]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        a, b = obj.half_extents
        mask = (np.abs(u) <= a) & (np.abs(v) <= b)
        # texture detail is seeded by the object itself, not its list
        # position, so an object looks the same after its neighbors are
        # grasped away
        obj_rng = np.random.default_rng([
            world.rng_seed, 2,
            int(round(obj.center[0] * 16)), int(round(obj.center[1] * 16)),
            obj.texture_id,
        ])
        tex = texture_image(obj.texture_id, size, size, obj_rng)
        shaded = (tex[mask].astype(np.float32) * 0.8 + 40.0)
        img[mask] = np.clip(shaded, 0, 255).astype(np.uint8)
        border = mask & ((np.abs(u) > a - OUTLINE_PX) | (np.abs(v) > b - OUTLINE_PX))
        img[border] = (img[border].astype(np.float32) * 0.35).astype(np.uint8)
    return img


def angle_distance(theta_a: float, theta_b: float) -> float:
    """Distance between two grasp angles under the mod-pi symmetry."""
    d = (theta_a - theta_b) % math.pi
    return min(d, math.pi - d)


def oracle_grasp_success(world: WorldState, executed: GraspConfig) -> bool:
    """True iff the executed point is inside some object's margin-shrunk
    footprint and the angle is within tolerance of perpendicular to that
    object's major axis."""
    size = world.scene_size
    if not (0 <= executed.x < size and 0 <= executed.y < size):
        raise InvalidInputError(f"executed grasp ({executed.x}, {executed.y}) outside scene")
    for obj in world.objects:
        if not obj.contains(executed.x, executed.y, margin=world.margin):
            continue
        perp = obj.major_axis_angle + math.pi / 2
        if angle_distance(executed.theta, perp) <= world.angle_tolerance:
            return True
    return False


def execute_with_noise(commanded: GraspConfig, noise: NoiseTransform) -> GraspConfig:
    """Apply a robot's displacement to the commanded position; the angle is
    untouched. The executed position is clamped to the scene."""
    dx, dy = noise.displacement(commanded.x, commanded.y)
    ex, ey = clip_to_scene(commanded.x + dx, commanded.y + dy, (noise.scene_size, noise.scene_size))
    return GraspConfig(x=ex, y=ey, theta=commanded.theta)


def label_grasp(
    world: WorldState,
    commanded: GraspConfig,
    robot_id: int,
    patch_size: int,
    scene: np.ndarray | None = None,
) -> GraspRecord:
    """Execute a commanded grasp with a robot's noise and build the record.

    The record stores the COMMANDED position and its patch, but the success
    label is evaluated at the noisy executed position.
    """
    if robot_id not in world.noise:
        raise InvalidInputError(f"robot_id {robot_id} not in world fleet")
    if scene is None:
        scene = render_scene(world)
    executed = execute_with_noise(commanded, world.noise[robot_id])
    success = oracle_grasp_success(world, executed)
    patch = extract_patch(scene, (commanded.x, commanded.y), patch_size)
    context = RobotContext(
        robot_id=robot_id, pixel_location=(commanded.x, commanded.y), scene_image=scene
    )
    return GraspRecord(
        scene_image=scene, patch=patch, grasp=commanded, success=success, context=context
    )


# ---------------------------------------------------------------------------
# Grasp sampling for dataset generation
# ---------------------------------------------------------------------------

def sample_grasp(world: WorldState, cfg: WorldConfig, rng: np.random.Generator) -> GraspConfig:
    """Draw one commanded grasp: object-neighborhood positions (a mix of
    clearly-inside and boundary-band points) plus a background fraction;
    angles are a mix of near-perpendicular and uniform."""
    size = cfg.scene_size
    u = rng.random()
    obj = None
    if u < cfg.bg_frac or not world.objects:
        x, y = rng.uniform(0, size - 1), rng.uniform(0, size - 1)
    else:
        obj = world.objects[int(rng.integers(0, len(world.objects)))]
        a, b = obj.half_extents
        if rng.random() < cfg.inside_frac:
            lu = rng.uniform(-(a - cfg.margin), a - cfg.margin)
            lv = rng.uniform(-(b - cfg.margin), b - cfg.margin)
        else:
            lu = rng.uniform(-(a + cfg.edge_band), a + cfg.edge_band)
            lv = rng.uniform(-(b + cfg.edge_band), b + cfg.edge_band)
        c, s = math.cos(obj.major_axis_angle), math.sin(obj.major_axis_angle)
        x = obj.center[0] + c * lu - s * lv
        y = obj.center[1] + s * lu + c * lv
        x, y = clip_to_scene(x, y, (size, size))
    if obj is not None and rng.random() < cfg.angle_near_frac:
        window = cfg.angle_tolerance * cfg.angle_window_factor
        theta = (obj.major_axis_angle + math.pi / 2 + rng.uniform(-window, window)) % math.pi
    else:
        theta = rng.uniform(0, math.pi)
    return GraspConfig(x=float(x), y=float(y), theta=float(theta))


def generate_dataset(cfg: WorldConfig, n_grasps: int, out_dir, split: str = "train"):
    """Generate a dataset of noisy-labeled grasps and write it to disk.

    Robots are assigned to records round-robin so the per-robot histogram is
    exactly uniform up to remainder. Returns the manifest.
    """
    from .persistence import DatasetWriter

    n_scenes = max(1, math.ceil(n_grasps / cfg.grasps_per_scene))
    writer = DatasetWriter(out_dir, cfg, split=split)
    n_written = 0
    n_positive = 0
    n_flipped = 0
    try:
        for scene_index in range(n_scenes):
            if n_written >= n_grasps:
                break
            world = make_world(cfg, scene_index)
            scene = render_scene(world)
            rng = np.random.default_rng([cfg.seed, scene_index, 3])
            writer.add_scene(scene_index, scene)
            count = min(cfg.grasps_per_scene, n_grasps - n_written)
            for _ in range(count):
                commanded = sample_grasp(world, cfg, rng)
                robot_id = n_written % cfg.n_robots
                executed = execute_with_noise(commanded, world.noise[robot_id])
                success = oracle_grasp_success(world, executed)
                clean = oracle_grasp_success(world, commanded)
                n_positive += int(success)
                n_flipped += int(success != clean)
                writer.add_record(
                    scene_index,
                    x=commanded.x,
                    y=commanded.y,
                    theta=commanded.theta,
                    success=success,
                    robot_id=robot_id,
                )
                n_written += 1
        stats = {
            "positive_rate": n_positive / max(1, n_written),
            "flipped_fraction": n_flipped / max(1, n_written),
        }
        return writer.finalize(stats=stats)
    except BaseException:
        writer.abort()
        raise
