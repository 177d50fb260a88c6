"""Synthetic primitive-shape clouds, text point files, manifests and splits.

Point file: whitespace-delimited text, one point per line, ``f`` columns.
Part-label file: one integer per line, aligned with its point file.
Manifest: one ``path<TAB>label`` line per cloud, where ``label`` is an integer
class id or the path of a part-label file. Optional directive lines
``#classes<TAB>name,name,...`` and ``#features<TAB>f`` declare class names and
point width; other ``#`` lines are comments. Relative paths resolve against
the manifest's directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import PointBatch
from .train import unit_sphere_normalize

FAMILIES = ("sphere", "cube", "plane", "torus", "cylinder")

# per-family part names; a point's part id is its index here
PARTS: Dict[str, Tuple[str, ...]] = {
    "sphere": ("north", "south"),
    "cube": ("top_bottom", "side"),
    "plane": ("left", "right"),
    "torus": ("inner", "outer"),
    "cylinder": ("cap", "side"),
}

TORUS_R, TORUS_TUBE = 1.0, 0.35
CYLINDER_RADIUS, CYLINDER_HEIGHT = 0.5, 1.5


class DataError(ValueError):
    """Malformed point file, manifest or split request."""


class PointFileError(DataError):
    pass


class StratificationError(DataError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    family: str
    n_points: int = 128
    sigma: float = 0.0
    segment: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown shape family {self.family!r}; expected one of {FAMILIES}")
        if self.n_points < 8:
            raise DataError(f"need at least 8 points per cloud, got {self.n_points}")
        if self.sigma < 0:
            raise DataError(f"noise sigma must be non-negative, got {self.sigma}")


@dataclass
class Cloud:
    points: np.ndarray  # (N, 3)
    part_labels: Optional[np.ndarray] = None  # (N,) indices into PARTS[family]


def sample_surface(family: str, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform surface samples of a primitive in its own frame, with part ids."""
    if family == "sphere":
        p = rng.normal(size=(n, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        return p, (p[:, 2] < 0).astype(np.int64)
    if family == "cube":
        # six faces of [-1, 1]^3, equal area
        face = rng.integers(0, 6, size=n)
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        p = rng.uniform(-1.0, 1.0, size=(n, 3))
        p[np.arange(n), axis] = sign
        return p, (axis != 2).astype(np.int64)
    if family == "plane":
        p = np.zeros((n, 3))
        p[:, :2] = rng.uniform(-1.0, 1.0, size=(n, 2))
        return p, (p[:, 0] >= 0).astype(np.int64)
    if family == "torus":
        # rejection on the tube angle: the area element is proportional to R + r cos(phi)
        out = np.empty((0, 2))
        while len(out) < n:
            theta, phi = rng.uniform(0, 2 * math.pi, size=(2, 2 * n))
            keep = rng.uniform(size=2 * n) < (TORUS_R + TORUS_TUBE * np.cos(phi)) / (TORUS_R + TORUS_TUBE)
            out = np.concatenate([out, np.stack([theta[keep], phi[keep]], 1)])
        theta, phi = out[:n].T
        ring = TORUS_R + TORUS_TUBE * np.cos(phi)
        p = np.stack([ring * np.cos(theta), ring * np.sin(theta), TORUS_TUBE * np.sin(phi)], 1)
        return p, (np.cos(phi) > 0).astype(np.int64)
    if family == "cylinder":
        r, h = CYLINDER_RADIUS, CYLINDER_HEIGHT
        side_area, cap_area = 2 * math.pi * r * h, 2 * math.pi * r * r
        side = rng.uniform(size=n) < side_area / (side_area + cap_area)
        theta = rng.uniform(0, 2 * math.pi, size=n)
        rad = np.where(side, r, r * np.sqrt(rng.uniform(size=n)))
        z = np.where(side, rng.uniform(-h / 2, h / 2, size=n), np.where(rng.uniform(size=n) < 0.5, -h / 2, h / 2))
        p = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], 1)
        return p, side.astype(np.int64)
    raise DataError(f"unknown shape family {family!r}")


def generate_cloud(spec: SyntheticSpec, rng: np.random.Generator) -> Cloud:
    """Surface samples plus Gaussian noise, rescaled into the unit sphere."""
    pts, parts = sample_surface(spec.family, spec.n_points, rng)
    if spec.sigma > 0:
        pts = pts + rng.normal(0.0, spec.sigma, size=pts.shape)
    return Cloud(unit_sphere_normalize(pts), parts if spec.segment else None)


def generate_dataset(
    families: Sequence[str],
    per_class: int,
    n_points: int,
    rng: np.random.Generator,
    sigma: float = 0.0,
    segment: bool = False,
) -> PointBatch:
    """``per_class`` clouds of each family, interleaved so any prefix is balanced.

    Classification labels are family indices. With ``segment`` the labels are
    per-point part ids, offset per family so parts of different families never
    share an id.
    """
    offsets = np.cumsum([0] + [len(PARTS[f]) for f in families])
    feats, labels = [], []
    for _ in range(per_class):
        for ci, fam in enumerate(families):
            cloud = generate_cloud(SyntheticSpec(fam, n_points, sigma, segment), rng)
            feats.append(cloud.points)
            labels.append(cloud.part_labels + offsets[ci] if segment else ci)
    num = int(offsets[-1]) if segment else len(families)
    return PointBatch(np.stack(feats), np.array(labels), num)


def subset(batch: PointBatch, idx) -> PointBatch:
    idx = np.asarray(idx)
    return PointBatch(batch.features[idx], None if batch.labels is None else batch.labels[idx], batch.num_classes)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def load_points(path, f: int) -> np.ndarray:
    """Parse a point file into an (N, f) array, preserving line order."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields_ = line.split()
            if not fields_:
                continue
            if len(fields_) != f:
                raise PointFileError(f"{path}: line {lineno}: expected {f} fields, found {len(fields_)}")
            try:
                rows.append([float(v) for v in fields_])
            except ValueError as exc:
                raise PointFileError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise PointFileError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def save_points(path, points) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.17g")


def load_part_labels(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(int(s))
            except ValueError:
                raise PointFileError(f"{path}: line {lineno}: not an integer label: {s!r}") from None
    return np.array(out, dtype=np.int64)


@dataclass
class DatasetManifest:
    entries: List[Tuple[Path, Union[int, Path]]]
    class_names: List[str] = field(default_factory=list)
    features: int = 3

    @property
    def class_ids(self) -> List[int]:
        if not all(isinstance(lbl, int) for _, lbl in self.entries):
            raise DataError("manifest holds part-label files, not class ids")
        return [lbl for _, lbl in self.entries]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} does not exist")
    base = path.parent
    entries, names, width = [], [], 3
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("\t")
            if key == "classes":
                names = [n for n in val.split(",") if n]
            elif key == "features":
                width = int(val)
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: line {lineno}: expected 'path<TAB>label'")
        file_, label = parts[0].strip(), parts[1].strip()
        point_path = base / file_
        if not point_path.is_file():
            raise DataError(f"{path}: line {lineno}: point file {point_path} not found")
        try:
            lbl: Union[int, Path] = int(label)
        except ValueError:
            lbl = base / label
            if not lbl.is_file():
                raise DataError(f"{path}: line {lineno}: label file {lbl} not found") from None
        entries.append((point_path, lbl))
    manifest = DatasetManifest(entries, names, width)
    if names and any(isinstance(l, int) and not 0 <= l < len(names) for _, l in entries):
        raise DataError(f"{path}: class id outside the {len(names)} declared classes")
    return manifest


def load_dataset(manifest: DatasetManifest, num_classes: Optional[int] = None) -> PointBatch:
    clouds, labels = [], []
    for point_path, lbl in manifest.entries:
        pts = load_points(point_path, manifest.features)
        if isinstance(lbl, Path):
            lbl = load_part_labels(lbl)
            if len(lbl) != len(pts):
                raise DataError(f"{point_path}: {len(pts)} points but {len(lbl)} part labels")
        clouds.append(pts)
        labels.append(lbl)
    if len({len(c) for c in clouds}) != 1:
        raise DataError("all clouds in a dataset must have the same number of points")
    labels = np.array(labels)
    if num_classes is None:
        num_classes = len(manifest.class_names) or int(labels.max()) + 1
    return PointBatch(np.stack(clouds), labels, num_classes)


def write_dataset(directory, batch: PointBatch, class_names: Sequence[str] = ()) -> Path:
    """Write one point file per cloud (plus part files) and a manifest; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    if class_names:
        lines.append("#classes\t" + ",".join(class_names))
    lines.append(f"#features\t{batch.features.shape[2]}")
    for i, pts in enumerate(batch.features):
        name = f"cloud_{i:05d}.txt"
        save_points(directory / name, pts)
        lbl = batch.labels[i]
        if np.ndim(lbl):
            part = f"cloud_{i:05d}.parts"
            (directory / part).write_text("".join(f"{int(v)}\n" for v in lbl))
            lines.append(f"{name}\t{part}")
        else:
            lines.append(f"{name}\t{int(lbl)}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def make_splits(labels, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified, seeded train/test index split.

    ``labels`` is a manifest or a sequence of class ids. Each class puts
    ``round(fraction * count)`` items (at least one, and leaving at least one)
    into train.
    """
    if isinstance(labels, DatasetManifest):
        labels = labels.class_ids
    labels = np.asarray(labels)
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            raise StratificationError(f"class {c} has {len(members)} item(s); stratification needs at least 2")
        members = rng.permutation(members)
        k = min(max(int(round(train_fraction * len(members))), 1), len(members) - 1)
        train.append(members[:k])
        test.append(members[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
