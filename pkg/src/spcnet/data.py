"""Point-cloud file I/O, procedural dataset generation, and ingestion.

The .xyz format is one point per line, "x y z" whitespace-separated with
9 significant digits, '#' lines ignored.  Procedural shapes stand in for a
real scan benchmark at desk scale: closed analytic surfaces sampled uniformly
by area, centered at the origin, scaled into [-1, 1]^3 by their bounding
geometry.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import fps, normalize_cloud
from .rng import Rng

log = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus", "plane")


# ---------------------------------------------------------------------------
# .xyz files
# ---------------------------------------------------------------------------

def write_xyz(cloud: np.ndarray, path) -> None:
    cloud = np.asarray(cloud, dtype=np.float64)
    with open(path, "w", newline="\n") as fh:
        for x, y, z in cloud:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_xyz(path) -> np.ndarray:
    points = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 coordinates, got {len(fields)}"
                )
            try:
                points.append([float(v) for v in fields])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric coordinate") from None
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# procedural surface samplers
# ---------------------------------------------------------------------------

def _unit_direction(rng: Rng) -> np.ndarray:
    z = rng.uniform(-1.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    r = math.sqrt(max(0.0, 1.0 - z * z))
    return np.array([r * math.cos(phi), r * math.sin(phi), z])


def _sphere(rng: Rng, n: int) -> np.ndarray:
    # Antipodal pairs keep the sample centroid at the origin to rounding.
    pts = np.empty((n, 3))
    half = n // 2
    for i in range(half):
        d = _unit_direction(rng)
        pts[i] = d
        pts[half + i] = -d
    if n % 2:
        pts[-1] = _unit_direction(rng)
    return pts


def _cube(rng: Rng, n: int) -> np.ndarray:
    ext = np.array([rng.uniform(0.5, 1.0) for _ in range(3)])
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    areas = np.repeat(areas, 2)  # +/- face per axis
    cumulative = np.cumsum(areas / areas.sum())
    pts = np.empty((n, 3))
    for i in range(n):
        u = rng.uniform()
        face = int(np.searchsorted(cumulative, u, side="right"))
        face = min(face, 5)
        axis, sign = divmod(face, 2)
        p = np.array([rng.uniform(-ext[a], ext[a]) for a in range(3)])
        p[axis] = ext[axis] if sign == 0 else -ext[axis]
        pts[i] = p
    return pts / ext.max()


def _cylinder(rng: Rng, n: int) -> np.ndarray:
    radius = rng.uniform(0.4, 0.9)
    half_h = rng.uniform(0.5, 1.0)
    lateral = 2.0 * math.pi * radius * 2.0 * half_h
    cap = math.pi * radius * radius
    total = lateral + 2.0 * cap
    pts = np.empty((n, 3))
    for i in range(n):
        u = rng.uniform(0.0, total)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        if u < lateral:
            z = rng.uniform(-half_h, half_h)
            pts[i] = (radius * math.cos(theta), radius * math.sin(theta), z)
        else:
            r = radius * math.sqrt(rng.uniform())
            z = half_h if u < lateral + cap else -half_h
            pts[i] = (r * math.cos(theta), r * math.sin(theta), z)
    return pts / max(radius, half_h)


def _cone(rng: Rng, n: int) -> np.ndarray:
    radius = rng.uniform(0.5, 0.9)
    half_h = rng.uniform(0.5, 1.0)
    slant = math.sqrt(radius * radius + 4.0 * half_h * half_h)
    lateral = math.pi * radius * slant
    base = math.pi * radius * radius
    pts = np.empty((n, 3))
    for i in range(n):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        if rng.uniform(0.0, lateral + base) < lateral:
            t = math.sqrt(rng.uniform())  # area-uniform along the slant
            r = radius * t
            z = half_h - 2.0 * half_h * t
        else:
            r = radius * math.sqrt(rng.uniform())
            z = -half_h
        pts[i] = (r * math.cos(theta), r * math.sin(theta), z)
    return pts / max(radius, half_h)


def _torus(rng: Rng, n: int) -> np.ndarray:
    major = rng.uniform(0.55, 0.75)
    minor = rng.uniform(0.15, 0.9 * major / 2.0)
    pts = np.empty((n, 3))
    for i in range(n):
        # rejection keeps the sampling uniform by area over the tube
        while True:
            psi = rng.uniform(0.0, 2.0 * math.pi)
            if rng.uniform() <= (major + minor * math.cos(psi)) / (major + minor):
                break
        theta = rng.uniform(0.0, 2.0 * math.pi)
        ring = major + minor * math.cos(psi)
        pts[i] = (ring * math.cos(theta), ring * math.sin(theta), minor * math.sin(psi))
    return pts / (major + minor)


def _plane(rng: Rng, n: int) -> np.ndarray:
    a = rng.uniform(0.5, 1.0)
    b = rng.uniform(0.5, 1.0)
    pts = np.empty((n, 3))
    for i in range(n):
        pts[i] = (rng.uniform(-a, a), rng.uniform(-b, b), 0.0)
    return pts / max(a, b)


_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
}


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    shapes: list = field(default_factory=list)  # (category, [n, 3] cloud)
    manifest: dict = field(default_factory=dict)


def generate_shapes(kinds, count: int, points_per_shape: int, seed: int) -> Dataset:
    """Deterministic procedural dataset, cycling through the requested kinds."""
    kinds = list(kinds)
    for kind in kinds:
        if kind not in _GENERATORS:
            raise ValueError(f"unknown shape kind {kind!r} (known: {SHAPE_KINDS})")
    if count < 1 or points_per_shape < 2:
        raise ValueError("need at least one shape and two points per shape")
    master = Rng(seed)
    shapes = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        shapes.append((kind, _GENERATORS[kind](master.spawn(), points_per_shape)))
    manifest = {
        "generator": "procedural",
        "seed": seed,
        "points_per_shape": points_per_shape,
        "shapes": [
            {"file": f"shape_{i:04d}.xyz", "category": kind}
            for i, (kind, _) in enumerate(shapes)
        ],
    }
    return Dataset(shapes=shapes, manifest=manifest)


def generate_dataset(out_dir, kinds, count: int, points_per_shape: int, seed: int) -> Dataset:
    """Generate and write a procedural dataset: one .xyz per shape + manifest."""
    dataset = generate_shapes(kinds, count, points_per_shape, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry, (_, cloud) in zip(dataset.manifest["shapes"], dataset.shapes):
        write_xyz(cloud, out_dir / entry["file"])
    with open(out_dir / "manifest.json", "w", newline="\n") as fh:
        json.dump(dataset.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return dataset


def load_dataset(data_dir) -> Dataset:
    """Load a directory: a generated dataset when a manifest is present,
    otherwise category subfolders of raw point files."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        shapes = [
            (entry["category"], read_xyz(data_dir / entry["file"]))
            for entry in manifest["shapes"]
        ]
        return Dataset(shapes=shapes, manifest=manifest)
    return ingest_category_tree(data_dir)


def _read_points_lenient(path) -> np.ndarray:
    """Parse 'x y z [extras]' lines; extras (labels, normals) are ignored."""
    points = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) < 3:
                raise ValueError(f"{path}:{lineno}: expected at least 3 fields")
            points.append([float(v) for v in fields[:3]])
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def resample_to(points: np.ndarray, target: int, rng: Rng) -> np.ndarray:
    """Exactly ``target`` points: a uniform draw without replacement when the
    cloud is large enough, otherwise all points plus duplicates taken in
    farthest-point order."""
    n = points.shape[0]
    if n >= target:
        idx = sorted(rng.sample_indices(n, target))
        return points[idx]
    order = fps(points, n)
    extra = [order[i % n] for i in range(target - n)]
    return points[np.concatenate([np.arange(n), np.asarray(extra, dtype=np.intp)])]


def ingest_category_tree(root, points_per_shape: int = 2048, seed: int = 0) -> Dataset:
    """Ingest a benchmark-style directory of category subfolders holding
    ASCII point files; each shape is resampled to a uniform count and
    normalized.  Unreadable files are skipped with a warning."""
    root = Path(root)
    rng = Rng(seed)
    shapes = []
    for category_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for file_path in sorted(category_dir.iterdir()):
            if not file_path.is_file():
                continue
            try:
                points = _read_points_lenient(file_path)
                if points.shape[0] < 2:
                    raise ValueError("fewer than 2 points")
                points = resample_to(points, points_per_shape, rng)
                points = normalize_cloud(points)
            except (ValueError, OSError) as exc:
                log.warning("skipping %s: %s", file_path, exc)
                continue
            shapes.append((category_dir.name, points))
    if not shapes:
        raise ValueError(f"no usable shapes under {root}")
    manifest = {
        "generator": "ingested",
        "root": str(root),
        "points_per_shape": points_per_shape,
    }
    return Dataset(shapes=shapes, manifest=manifest)
