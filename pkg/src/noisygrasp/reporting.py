"""Report rendering: cross-train/cross-test accuracy tables and the
noise-correction vector-field dump.

All outputs are plain deterministic text: same inputs, same bytes. The
tables carry the published physical-robot reference numbers as annotations
for context; those numbers come from hardware experiments and are never
treated as targets.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import IncompleteGridError, InvalidInputError

# squared cos(45 deg): the alignment test uses a quarter-plane cone on each
# side, matching the eight-direction quantization of the hypothesis offsets;
# comparing squared dot products keeps the cone boundary exact
ALIGN_COS_SQ = 0.5

REFERENCE_ANNOTATIONS = (
    "reference numbers from the original physical-robot experiments",
    "(marked: not reproducible — physical data):",
    "  binary classification accuracy (robot-A / robot-B / combined): 76.9 / 69.9 / 73.0",
    "  overall real-environment grasp success: 62.08",
    "  on-robot grasp success (robust / baseline / no-adaptation): 77.50 / 56.25 / 1.25",
)


# ---------------------------------------------------------------------------
# Accuracy grid
# ---------------------------------------------------------------------------

def collect_eval_results(metrics_dir) -> list:
    """Load every eval_*.json in a directory. Each file holds one cell:
    {"model": ..., "train_set": ..., "test_set": ..., "accuracy": ...}."""
    metrics_dir = Path(metrics_dir)
    results = []
    for path in sorted(metrics_dir.glob("eval_*.json")):
        with open(path, "r", encoding="utf-8") as f:
            row = json.load(f)
        for key in ("model", "train_set", "test_set", "accuracy"):
            if key not in row:
                raise InvalidInputError(f"{path} is missing the {key!r} field")
        results.append(row)
    return results


def report_tables(metrics_dir, out_path=None) -> str:
    """Render the (model, train-set) x test-set accuracy grid as text.

    Every (model, train_set) row must have a cell for every test_set seen
    anywhere in the directory; gaps raise an error naming the missing
    (model, dataset) pairs.
    """
    results = collect_eval_results(metrics_dir)
    if not results:
        raise IncompleteGridError([("any", "any")])
    cells = {}
    for row in results:
        cells[(row["model"], row["train_set"], row["test_set"])] = float(row["accuracy"])
    row_keys = sorted({(r["model"], r["train_set"]) for r in results})
    col_keys = sorted({r["test_set"] for r in results})
    missing = [
        (model, f"train={train} test={test}")
        for (model, train) in row_keys
        for test in col_keys
        if (model, train, test) not in cells
    ]
    if missing:
        raise IncompleteGridError(missing)

    model_w = max(len("model"), *(len(m) for m, _ in row_keys))
    train_w = max(len("train-set"), *(len(t) for _, t in row_keys))
    col_w = max(8, *(len(c) for c in col_keys))
    lines = []
    header = f"{'model':<{model_w}}  {'train-set':<{train_w}}"
    for c in col_keys:
        header += f"  {c:>{col_w}}"
    lines.append(header)
    lines.append("-" * len(header))
    for model, train in row_keys:
        line = f"{model:<{model_w}}  {train:<{train_w}}"
        for test in col_keys:
            line += f"  {cells[(model, train, test)]:>{col_w}.4f}"
        lines.append(line)
    lines.append("")
    for note in REFERENCE_ANNOTATIONS:
        lines.append("# " + note)
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        Path(out_path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# Noise-field dump and direction consistency
# ---------------------------------------------------------------------------

def field_consistency(pairs) -> dict:
    """Directional agreement between predicted correction offsets and true
    displacements.

    ``pairs`` is an iterable of ((dx, dy), (true_dx, true_dy)). A point
    counts as aligned when the angle between the two vectors is under 45
    degrees, anti-aligned when over 135 degrees; zero vectors count as
    neither. The consistency score is the larger of the two fractions (the
    model may learn either sign convention, but must stick to one).
    """
    n = 0
    aligned = 0
    anti = 0
    dom = np.zeros(2)
    for (dx, dy), (gx, gy) in pairs:
        n += 1
        a2 = dx * dx + dy * dy
        g2 = gx * gx + gy * gy
        if a2 > 0:
            dom += np.array([dx, dy]) / math.sqrt(a2)
        if a2 == 0 or g2 == 0:
            continue
        dot = dx * gx + dy * gy
        if dot * dot >= ALIGN_COS_SQ * a2 * g2:
            if dot > 0:
                aligned += 1
            else:
                anti += 1
    if n == 0:
        raise InvalidInputError("field_consistency needs at least one probe point")
    frac_aligned = aligned / n
    frac_anti = anti / n
    orientation = "aligned" if frac_aligned >= frac_anti else "anti-aligned"
    norm = float(np.hypot(*dom))
    dominant = tuple((dom / norm).tolist()) if norm > 0 else (0.0, 0.0)
    return {
        "n": n,
        "frac_aligned": frac_aligned,
        "frac_anti": frac_anti,
        "consistency": max(frac_aligned, frac_anti),
        "orientation": orientation,
        "dominant_direction": dominant,
    }


def emit_noise_field_plot(checkpoint_path, robot_id: int, grid, out_path) -> dict:
    """Write the learned correction field next to the ground-truth
    displacement field as plain rows of ``x y dx dy true_dx true_dy``.

    The checkpoint must carry the robot in its metadata and the world
    configuration used for training (so the true field can be rebuilt).
    A leading comment line reports the direction-consistency score. Returns
    the consistency summary.
    """
    from .model import load_checkpoint, noise_correction_field
    from .simworld import WorldConfig, make_world, render_scene

    model, extra = load_checkpoint(checkpoint_path)
    robot_ids = extra.get("robot_ids")
    if robot_ids is None or robot_id not in robot_ids:
        raise InvalidInputError(
            f"robot_id {robot_id} not in checkpoint metadata (has {robot_ids})"
        )
    world_cfg = WorldConfig.from_dict(extra["world_config"])
    world = make_world(world_cfg, 0)
    scene = render_scene(world)
    probes = noise_correction_field(model, scene, robot_id, grid)
    noise = world.noise[robot_id]
    rows = []
    pairs = []
    for (x, y), (dx, dy) in probes:
        gx, gy = noise.displacement(x, y)
        rows.append((x, y, dx, dy, gx, gy))
        pairs.append(((dx, dy), (gx, gy)))
    summary = field_consistency(pairs)

    lines = [
        f"# noise correction field, robot {robot_id}, {len(rows)} probes",
        "# columns: x y dx dy true_dx true_dy",
        (
            f"# consistency: {summary['consistency'] * 100:.2f}% "
            f"({summary['orientation']}), aligned {summary['frac_aligned'] * 100:.2f}%, "
            f"anti-aligned {summary['frac_anti'] * 100:.2f}%"
        ),
    ]
    for x, y, dx, dy, gx, gy in rows:
        lines.append(f"{x:.4f} {y:.4f} {dx:.4f} {dy:.4f} {gx:.4f} {gy:.4f}")
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return summary
