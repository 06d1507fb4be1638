"""Dataset persistence: per-scene raster blobs, JSONL record sidecar, manifest.

Layout of a dataset directory::

    manifest.json            # counts, hashes, split tag, config echo
    records.jsonl            # one record per line, scene-referenced
    scenes/scene_00000.npy   # uint8 HxWx3 raster per scene

Records store the commanded grasp and label only; the patch raster is
reconstructed from the scene at read time (the extraction is deterministic,
so the round-trip is lossless). Writers take an exclusive lock file on the
directory; readers verify the manifest hashes before yielding anything.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GraspConfig, GraspRecord, RobotContext, extract_patch
from .errors import (
    ConcurrentWriteError,
    CorruptDatasetError,
    CorruptRecordError,
    InvalidInputError,
    UnsupportedVersionError,
)

FORMAT_VERSION = 1
_LOCK_NAME = ".lock"

# Config fields that determine the noise fleet; hashed into the manifest so
# train/heldout splits can be checked for a shared fleet.
_NOISE_FIELDS = (
    "noise_seed",
    "n_robots",
    "max_noise",
    "offset_norm_lo",
    "offset_norm_hi",
    "affine_eps",
    "field_amp",
    "scene_size",
)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def noise_fingerprint(world_cfg) -> str:
    payload = {k: getattr(world_cfg, k) for k in _NOISE_FIELDS}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class DatasetManifest:
    format_version: int
    record_count: int
    robot_ids: list
    scene_seeds: list  # [generation seed, scene index] pairs
    noise_fingerprint: str
    split: str
    patch_size: int
    scene_size: int
    stats: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    world_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "record_count": self.record_count,
            "robot_ids": self.robot_ids,
            "scene_seeds": self.scene_seeds,
            "noise_fingerprint": self.noise_fingerprint,
            "split": self.split,
            "patch_size": self.patch_size,
            "scene_size": self.scene_size,
            "stats": self.stats,
            "files": self.files,
            "world_config": self.world_config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)

    def content_hash(self) -> str:
        """Hash over the record files, stable across re-serialization."""
        return hashlib.sha256(
            json.dumps(self.files, sort_keys=True).encode()
        ).hexdigest()


class _DirectoryLock:
    def __init__(self, directory: Path):
        self.path = directory / _LOCK_NAME
        self.fd = None

    def acquire(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConcurrentWriteError(
                f"dataset directory {self.path.parent} is locked by another writer"
            )

    def release(self):
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass


class DatasetWriter:
    """Streaming writer for one dataset directory; exclusive via lock file."""

    def __init__(self, out_dir, world_cfg, split: str = "train"):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "scenes").mkdir(exist_ok=True)
        self._lock = _DirectoryLock(self.dir)
        self._lock.acquire()
        self.world_cfg = world_cfg
        self.split = split
        self._records_path = self.dir / "records.jsonl"
        self._records_file = open(self._records_path, "w", encoding="utf-8")
        self._count = 0
        self._robot_ids = set()
        self._scene_ids = []

    def add_scene(self, scene_id: int, scene: np.ndarray):
        if scene.dtype != np.uint8 or scene.ndim != 3:
            raise InvalidInputError("scene must be a uint8 HxWx3 raster")
        np.save(self.dir / "scenes" / f"scene_{scene_id:05d}.npy", scene)
        self._scene_ids.append(scene_id)

    def add_record(self, scene_id: int, x: float, y: float, theta: float,
                   success: bool, robot_id: int):
        row = {
            "index": self._count,
            "scene_id": scene_id,
            "x": float(x),
            "y": float(y),
            "theta": float(theta),
            "success": int(bool(success)),
            "robot_id": int(robot_id),
        }
        self._records_file.write(json.dumps(row, sort_keys=True) + "\n")
        self._count += 1
        self._robot_ids.add(int(robot_id))

    def finalize(self, stats: dict | None = None) -> DatasetManifest:
        self._records_file.close()
        files = {"records.jsonl": _sha256_file(self._records_path)}
        for sid in sorted(self._scene_ids):
            rel = f"scenes/scene_{sid:05d}.npy"
            files[rel] = _sha256_file(self.dir / rel)
        manifest = DatasetManifest(
            format_version=FORMAT_VERSION,
            record_count=self._count,
            robot_ids=sorted(self._robot_ids),
            scene_seeds=[[self.world_cfg.seed, sid] for sid in sorted(self._scene_ids)],
            noise_fingerprint=noise_fingerprint(self.world_cfg),
            split=self.split,
            patch_size=self.world_cfg.patch_size,
            scene_size=self.world_cfg.scene_size,
            stats=stats or {},
            files=files,
            world_config=self.world_cfg.to_dict(),
        )
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest.to_dict(), f, sort_keys=True, indent=1)
            f.write("\n")
        self._lock.release()
        return manifest

    def abort(self):
        try:
            self._records_file.close()
        finally:
            self._lock.release()


def read_manifest(path) -> DatasetManifest:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise CorruptDatasetError(f"no manifest at {mpath}")
    with open(mpath, encoding="utf-8") as f:
        d = json.load(f)
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"dataset format version {version} not supported (reader is {FORMAT_VERSION})"
        )
    return DatasetManifest.from_dict(d)


def verify_dataset(path) -> DatasetManifest:
    """Check every file hash and the record count against the manifest."""
    root = Path(path)
    manifest = read_manifest(root)
    for rel, expected in manifest.files.items():
        fpath = root / rel
        if not fpath.exists():
            raise CorruptDatasetError(f"missing file {rel}")
        actual = _sha256_file(fpath)
        if actual != expected:
            raise CorruptDatasetError(f"hash mismatch for {rel}")
    with open(root / "records.jsonl", encoding="utf-8") as f:
        n_lines = sum(1 for _ in f)
    if n_lines != manifest.record_count:
        raise CorruptDatasetError(
            f"manifest says {manifest.record_count} records, found {n_lines}"
        )
    return manifest


def _load_scene(root: Path, scene_id: int, cache: dict) -> np.ndarray:
    if scene_id not in cache:
        fpath = root / "scenes" / f"scene_{scene_id:05d}.npy"
        if not fpath.exists():
            raise CorruptDatasetError(f"missing scene raster {fpath.name}")
        cache[scene_id] = np.load(fpath)
    return cache[scene_id]


def read_records(path, verify: bool = True):
    """Yield GraspRecords from a dataset directory.

    Patches are reconstructed from the stored scene at the recorded center,
    which reproduces the written patch exactly. Malformed lines raise
    CorruptRecordError with the offending index; nothing is yielded after
    an error.
    """
    root = Path(path)
    manifest = verify_dataset(root) if verify else read_manifest(root)
    cache: dict = {}
    with open(root / "records.jsonl", encoding="utf-8") as f:
        for i, line in enumerate(f):
            try:
                row = json.loads(line)
                scene = _load_scene(root, int(row["scene_id"]), cache)
                grasp = GraspConfig(x=row["x"], y=row["y"], theta=row["theta"])
                patch = extract_patch(scene, (grasp.x, grasp.y), manifest.patch_size)
                context = RobotContext(
                    robot_id=int(row["robot_id"]),
                    pixel_location=(grasp.x, grasp.y),
                    scene_image=scene,
                )
                yield GraspRecord(
                    scene_image=scene,
                    patch=patch,
                    grasp=grasp,
                    success=bool(row["success"]),
                    context=context,
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorruptRecordError(i, str(exc)) from exc


def write_records(out_dir, records, world_cfg, split: str = "train") -> DatasetManifest:
    """Write an iterable of GraspRecords as a dataset directory.

    Scene rasters are deduplicated by content; each record's patch must be
    the deterministic extraction from its scene at the dataset patch size.
    """
    writer = DatasetWriter(out_dir, world_cfg, split=split)
    scene_ids: dict = {}
    try:
        for rec in records:
            key = hashlib.sha256(rec.scene_image.tobytes()).hexdigest()
            if key not in scene_ids:
                sid = len(scene_ids)
                scene_ids[key] = sid
                writer.add_scene(sid, rec.scene_image)
            expected = extract_patch(
                rec.scene_image, (rec.grasp.x, rec.grasp.y), world_cfg.patch_size
            )
            if rec.patch.shape != expected.shape or not np.array_equal(rec.patch, expected):
                writer.abort()
                raise InvalidInputError(
                    "record patch is not the extraction of its scene at the "
                    "dataset patch size; cannot round-trip"
                )
            writer.add_record(
                scene_ids[key],
                x=rec.grasp.x,
                y=rec.grasp.y,
                theta=rec.grasp.theta,
                success=rec.success,
                robot_id=rec.context.robot_id,
            )
        return writer.finalize()
    except InvalidInputError:
        raise
    except BaseException:
        writer.abort()
        raise


def load_dataset_arrays(path, verify: bool = True) -> dict:
    """Load a dataset as flat numpy arrays plus the scene list (fast path
    for training). Returns a dict with keys: scenes (dict id->raster), x, y,
    theta, success, robot_id, scene_id, manifest."""
    root = Path(path)
    manifest = verify_dataset(root) if verify else read_manifest(root)
    xs, ys, thetas, succ, robot, scene = [], [], [], [], [], []
    with open(root / "records.jsonl", encoding="utf-8") as f:
        for i, line in enumerate(f):
            try:
                row = json.loads(line)
                xs.append(row["x"])
                ys.append(row["y"])
                thetas.append(row["theta"])
                succ.append(row["success"])
                robot.append(row["robot_id"])
                scene.append(row["scene_id"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorruptRecordError(i, str(exc)) from exc
    cache: dict = {}
    for sid in sorted(set(scene)):
        _load_scene(root, sid, cache)
    return {
        "manifest": manifest,
        "scenes": cache,
        "x": np.asarray(xs, dtype=np.float64),
        "y": np.asarray(ys, dtype=np.float64),
        "theta": np.asarray(thetas, dtype=np.float64),
        "success": np.asarray(succ, dtype=np.float32),
        "robot_id": np.asarray(robot, dtype=np.int64),
        "scene_id": np.asarray(scene, dtype=np.int64),
    }
