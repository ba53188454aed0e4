"""Point-cloud file formats, datasets, and the synthetic superellipsoid family.

Synthetic instances share one (latitude, longitude) parameter grid, so point
``corr_ids`` equal across instances are true dense correspondences.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, normalize_cloud

__all__ = [
    "ParseError",
    "FormatError",
    "load_cloud",
    "save_cloud",
    "load_labels",
    "save_labels",
    "read_keypoints_csv",
    "write_keypoints_csv",
    "Dataset",
    "SynthSpec",
    "synth_generate",
    "make_splits",
    "test_pairs",
    "save_dataset",
    "load_dataset",
    "BODY",
    "COMPONENT",
    "BASE",
]

BODY, COMPONENT, BASE = 0, 1, 2

CPCD_MAGIC = b"CPCD"
CPCD_VERSION = 1
_F_LABELS, _F_COLORS, _F_IDS, _F_F64 = 1, 2, 4, 8


class ParseError(ValueError):
    """Malformed point-cloud file."""


class FormatError(ValueError):
    """Unsupported file extension."""


# -- single clouds -----------------------------------------------------------------
def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    """Write ``.xyz`` (text) or ``.cpcd`` (binary); keypoints go to a sidecar CSV."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        _write_xyz(cloud, path)
    elif suffix == ".cpcd":
        _write_cpcd(cloud, path)
    else:
        raise FormatError(f"unknown point-cloud extension {path.suffix!r} (use .xyz or .cpcd)")
    sidecar = _keypoint_sidecar(path)
    if cloud.keypoints:
        write_keypoints_csv(sidecar, {path.stem: cloud.keypoints})
    elif sidecar.exists():
        sidecar.unlink()


def load_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        cloud = _read_xyz(path)
    elif suffix == ".cpcd":
        cloud = _read_cpcd(path)
    else:
        raise FormatError(f"unknown point-cloud extension {path.suffix!r} (use .xyz or .cpcd)")
    sidecar = _keypoint_sidecar(path)
    if sidecar.exists():
        cloud.keypoints = read_keypoints_csv(sidecar).get(path.stem, {})
    cloud.name = path.stem
    return cloud


def _keypoint_sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".keypoints.csv")


def _write_xyz(cloud: PointCloud, path: Path) -> None:
    cols = ["x", "y", "z"]
    blocks = [np.asarray(cloud.points, dtype=np.float64)]
    if cloud.labels is not None:
        cols.append("label")
        blocks.append(np.asarray(cloud.labels, dtype=np.float64)[:, None])
    if cloud.colors is not None:
        cols += ["r", "g", "b"]
        blocks.append(np.asarray(cloud.colors, dtype=np.float64))
    if cloud.corr_ids is not None:
        cols.append("id")
        blocks.append(np.asarray(cloud.corr_ids, dtype=np.float64)[:, None])
    table = np.concatenate(blocks, axis=1)
    ints = {i for i, c in enumerate(cols) if c in ("label", "id")}
    lines = [f"# columns: {' '.join(cols)}", f"# dtype: {cloud.points.dtype.name}"]
    for row in table:
        lines.append(" ".join(str(int(v)) if i in ints else repr(float(v)) for i, v in enumerate(row)))
    path.write_text("\n".join(lines) + "\n")


_DEFAULT_COLUMNS = {3: "x y z", 4: "x y z label", 6: "x y z r g b", 7: "x y z label r g b"}


def _read_xyz(path: Path) -> PointCloud:
    cols: list[str] | None = None
    dtype = np.float64
    rows: list[list[float]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            body = text[1:].strip()
            if body.startswith("columns:"):
                cols = body[len("columns:"):].split()
            elif body.startswith("dtype:"):
                dtype = np.dtype(body[len("dtype:"):].strip())
            continue
        tokens = text.replace(",", " ").split()
        try:
            values = [float(t) for t in tokens]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric token in {text!r}") from exc
        if cols is None:
            if len(values) not in _DEFAULT_COLUMNS:
                raise ParseError(f"{path}:{lineno}: cannot infer columns from {len(values)} values")
            cols = _DEFAULT_COLUMNS[len(values)].split()
        if len(values) != len(cols):
            raise ParseError(f"{path}:{lineno}: expected {len(cols)} values, found {len(values)}")
        if not all(np.isfinite(values)):
            raise ParseError(f"{path}:{lineno}: non-finite value")
        rows.append(values)
    if not rows:
        raise ParseError(f"{path}: no points")
    table = np.array(rows, dtype=np.float64)
    pos = {c: i for i, c in enumerate(cols)}
    missing = {"x", "y", "z"} - set(pos)
    if missing:
        raise ParseError(f"{path}: missing columns {sorted(missing)}")
    points = table[:, [pos["x"], pos["y"], pos["z"]]].astype(dtype)
    labels = table[:, pos["label"]].astype(np.int64) if "label" in pos else None
    colors = table[:, [pos["r"], pos["g"], pos["b"]]] if "r" in pos else None
    ids = table[:, pos["id"]].astype(np.int64) if "id" in pos else None
    return PointCloud(points, labels=labels, colors=colors, corr_ids=ids)


def _write_cpcd(cloud: PointCloud, path: Path) -> None:
    pts = np.asarray(cloud.points)
    f64 = pts.dtype == np.float64
    flags = (_F_F64 if f64 else 0)
    flags |= _F_LABELS if cloud.labels is not None else 0
    flags |= _F_COLORS if cloud.colors is not None else 0
    flags |= _F_IDS if cloud.corr_ids is not None else 0
    parts = [CPCD_MAGIC, struct.pack("<III", CPCD_VERSION, len(pts), flags)]
    parts.append(np.ascontiguousarray(pts, dtype="<f8" if f64 else "<f4").tobytes())
    if cloud.labels is not None:
        parts.append(np.ascontiguousarray(cloud.labels, dtype="<i4").tobytes())
    if cloud.colors is not None:
        parts.append(np.ascontiguousarray(cloud.colors, dtype="<f8").tobytes())
    if cloud.corr_ids is not None:
        parts.append(np.ascontiguousarray(cloud.corr_ids, dtype="<i4").tobytes())
    path.write_bytes(b"".join(parts))


def _read_cpcd(path: Path) -> PointCloud:
    buf = path.read_bytes()
    if len(buf) < 16 or buf[:4] != CPCD_MAGIC:
        raise ParseError(f"{path}: byte 0: missing CPCD magic")
    version, k, flags = struct.unpack_from("<III", buf, 4)
    if version != CPCD_VERSION:
        raise ParseError(f"{path}: byte 4: unsupported version {version}")
    pos = 16

    def block(dtype: str, count: int) -> np.ndarray:
        nonlocal pos
        size = np.dtype(dtype).itemsize * count
        if pos + size > len(buf):
            raise ParseError(f"{path}: byte {pos}: truncated data block")
        out = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += size
        return out

    f64 = bool(flags & _F_F64)
    points = block("<f8" if f64 else "<f4", 3 * k).reshape(k, 3).astype(np.float64 if f64 else np.float32)
    labels = block("<i4", k).astype(np.int64) if flags & _F_LABELS else None
    colors = block("<f8", 3 * k).reshape(k, 3).copy() if flags & _F_COLORS else None
    ids = block("<i4", k).astype(np.int64) if flags & _F_IDS else None
    if pos != len(buf):
        raise ParseError(f"{path}: byte {pos}: trailing data")
    if not np.isfinite(points).all():
        raise ParseError(f"{path}: non-finite coordinates")
    return PointCloud(points, labels=labels, colors=colors, corr_ids=ids)


def save_labels(labels: np.ndarray, path: str | Path) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def load_labels(path: str | Path) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(int(line.strip()))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: expected an integer label, got {line.strip()!r}") from exc
    return np.array(out, dtype=np.int64)


def write_keypoints_csv(path: str | Path, keypoints: dict[str, dict[int, np.ndarray]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape_id", "keypoint_id", "x", "y", "z"])
        for shape_id, kps in keypoints.items():
            for kid in sorted(kps):
                writer.writerow([shape_id, kid, *(repr(float(v)) for v in kps[kid])])


def read_keypoints_csv(path: str | Path) -> dict[str, dict[int, np.ndarray]]:
    out: dict[str, dict[int, np.ndarray]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["shape_id", "keypoint_id", "x", "y", "z"]:
            raise ParseError(f"{path}:1: expected header shape_id,keypoint_id,x,y,z")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                shape_id, kid = row[0], int(row[1])
                pos = np.array([float(v) for v in row[2:5]])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed keypoint row {row!r}") from exc
            if pos.shape != (3,):
                raise ParseError(f"{path}:{lineno}: malformed keypoint row {row!r}")
            out.setdefault(shape_id, {})[kid] = pos
    return out


# -- datasets ---------------------------------------------------------------------------
@dataclass
class Dataset:
    clouds: list[PointCloud]
    splits: list[str] = field(default_factory=list)
    category: str = "synthetic"

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.clouds)
        if len(self.splits) != len(self.clouds):
            raise ValueError("one split assignment per cloud is required")

    def __len__(self) -> int:
        return len(self.clouds)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split: str) -> list[PointCloud]:
        return [self.clouds[i] for i in self.indices(split)]

    def normalized(self) -> "Dataset":
        return Dataset([normalize_cloud(c)[0] for c in self.clouds], list(self.splits), self.category)


def make_splits(n: int, ratios=(0.6, 0.15, 0.25), seed: int = 0) -> list[str]:
    """Seeded disjoint train/val/test assignment for ``n`` items."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    counts = [n_train, n_val, n - n_train - n_val]
    for name, ratio, count in zip(("train", "val", "test"), ratios, counts):
        if ratio > 0 and count == 0:
            raise ValueError(f"split {name!r} would be empty for n={n} and ratios {ratios.tolist()}")
    order = np.random.default_rng(seed).permutation(n)
    out = [""] * n
    names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    for idx, name in zip(order, names):
        out[int(idx)] = name
    return out


def test_pairs(dataset: Dataset, split: str = "test", require: str | None = "keypoints") -> list[tuple[int, int]]:
    """All ordered pairs within a split that share the required annotation.

    ``require="keypoints"`` keeps pairs with at least one common keypoint id;
    ``require="labels"`` keeps pairs whose part-label vocabularies coincide.
    """
    idx = dataset.indices(split)
    pairs = []
    for i in idx:
        for j in idx:
            if i == j:
                continue
            a, b = dataset.clouds[i], dataset.clouds[j]
            if require == "keypoints" and not (set(a.keypoints) & set(b.keypoints)):
                continue
            if require == "labels":
                if a.labels is None or b.labels is None or set(np.unique(a.labels)) != set(np.unique(b.labels)):
                    continue
            pairs.append((i, j))
    return pairs


def save_dataset(dataset: Dataset, directory: str | Path, fmt: str = "cpcd", extra: dict | None = None) -> list[Path]:
    directory = Path(directory)
    shapes = directory / "shapes"
    shapes.mkdir(parents=True, exist_ok=True)
    written = []
    keypoints = {}
    names = []
    for i, cloud in enumerate(dataset.clouds):
        name = cloud.name or f"shape_{i:04d}"
        names.append(name)
        path = shapes / f"{name}.{fmt}"
        save_cloud(cloud.with_points(cloud.points, {}), path)
        written.append(path)
        if cloud.keypoints:
            keypoints[name] = cloud.keypoints
    kp_path = directory / "keypoints.csv"
    write_keypoints_csv(kp_path, keypoints)
    meta = {"category": dataset.category, "format": fmt, "shapes": names, "splits": dataset.splits}
    if extra:
        meta.update(extra)
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2))
    return written + [kp_path, directory / "dataset.json"]


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path}: no dataset description")
    meta = json.loads(meta_path.read_text())
    keypoints = read_keypoints_csv(directory / "keypoints.csv") if (directory / "keypoints.csv").exists() else {}
    clouds = []
    for name in meta["shapes"]:
        cloud = load_cloud(directory / "shapes" / f"{name}.{meta['format']}")
        cloud.keypoints = keypoints.get(name, {})
        clouds.append(cloud)
    return Dataset(clouds, list(meta["splits"]), meta.get("category", "synthetic"))


# -- synthetic family -------------------------------------------------------------------
@dataclass
class SynthSpec:
    """Parameters of the superellipsoid family.

    Each instance is a superellipsoid body on a shared parameter grid, a flat
    base disk below it, and with probability ``component_prob`` a side
    component (think armrest). Keypoints: the six body axis extremes (ids 0-5)
    and the two base rim anchors along x (ids 6, 7).
    """

    n_shapes: int = 40
    axis_scale: tuple[float, float] = (0.55, 1.0)
    height_scale: tuple[float, float] = (0.6, 1.0)
    exponent: tuple[float, float] = (0.6, 1.0)
    component_prob: float = 0.5
    grid: tuple[int, int] = (15, 16)
    base_rings: tuple[int, ...] = (8, 16)
    component_grid: tuple[int, int] = (4, 8)
    seed: int = 0

    def validate(self) -> None:
        lat, lon = self.grid
        if lat < 8 or lon < 8:
            raise ValueError(f"grid resolution must be at least 8x8, got {self.grid}")
        if lat % 2 == 0 or lon % 4:
            raise ValueError("grid needs an odd latitude count and a longitude count divisible by 4")
        for name in ("axis_scale", "height_scale", "exponent"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} range must be positive and ordered, got {(lo, hi)}")
        if not 0.0 <= self.component_prob <= 1.0:
            raise ValueError("component_prob must lie in [0, 1]")


def _spow(x: np.ndarray, e: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** e


def superellipsoid_points(a: float, b: float, c: float, e1: float, e2: float, grid: tuple[int, int]) -> np.ndarray:
    """Body samples: ``lat`` interior rings times ``lon`` meridians, then the two poles."""
    lat, lon = grid
    eta = -np.pi / 2 + np.pi * np.arange(1, lat + 1) / (lat + 1)
    omega = -np.pi + 2 * np.pi * np.arange(lon) / lon
    eta_g, om_g = np.meshgrid(eta, omega, indexing="ij")
    ce, se = np.cos(eta_g), np.sin(eta_g)
    # exact zeros keep the axis extremes on the axes
    ce[np.isclose(ce, 0.0, atol=1e-12)] = 0.0
    se[np.isclose(se, 0.0, atol=1e-12)] = 0.0
    co, so = np.cos(om_g), np.sin(om_g)
    co[np.isclose(co, 0.0, atol=1e-12)] = 0.0
    so[np.isclose(so, 0.0, atol=1e-12)] = 0.0
    x = a * _spow(ce, e1) * _spow(co, e2)
    y = b * _spow(ce, e1) * _spow(so, e2)
    z = c * _spow(se, e1)
    body = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    poles = np.array([[0.0, 0.0, c], [0.0, 0.0, -c]])
    return np.concatenate([body, poles])


def _extreme_indices(grid: tuple[int, int]) -> dict[int, int]:
    lat, lon = grid
    eq = lat // 2
    col = {0.0: lon // 2, np.pi / 2: 3 * lon // 4, -np.pi / 2: lon // 4, np.pi: 0}
    return {
        0: eq * lon + col[0.0],  # +x
        1: eq * lon + col[np.pi],  # -x
        2: eq * lon + col[np.pi / 2],  # +y
        3: eq * lon + col[-np.pi / 2],  # -y
        4: lat * lon,  # +z
        5: lat * lon + 1,  # -z
    }


def _base_points(radius: float, z: float, rings: tuple[int, ...]) -> np.ndarray:
    pts = [np.array([[0.0, 0.0, z]])]
    for r_i, count in enumerate(rings, start=1):
        r = radius * r_i / len(rings)
        ang = 2 * np.pi * np.arange(count) / count
        pts.append(np.stack([r * np.cos(ang), r * np.sin(ang), np.full(count, z)], axis=1))
    return np.concatenate(pts)


def _component_points(center: np.ndarray, radii: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    lat, lon = grid
    eta = -np.pi / 2 + np.pi * np.arange(1, lat + 1) / (lat + 1)
    omega = 2 * np.pi * np.arange(lon) / lon
    eg, og = np.meshgrid(eta, omega, indexing="ij")
    unit = np.stack([np.cos(eg) * np.cos(og), np.cos(eg) * np.sin(og), np.sin(eg)], axis=-1).reshape(-1, 3)
    return center + unit * radii


def synth_generate(spec: SynthSpec | None = None) -> Dataset:
    """Generate the synthetic family with labels, keypoints and dense ids."""
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lat, lon = spec.grid
    n_body = lat * lon + 2
    n_base = 1 + sum(spec.base_rings)
    extremes = _extreme_indices(spec.grid)
    outer = spec.base_rings[-1]
    clouds = []
    for i in range(spec.n_shapes):
        a, b = rng.uniform(*spec.axis_scale, size=2)
        c = rng.uniform(*spec.height_scale)
        e1, e2 = rng.uniform(*spec.exponent, size=2)
        base_r = rng.uniform(0.5, 0.8) * min(a, b)
        has_comp = rng.uniform() < spec.component_prob
        comp_size = rng.uniform(0.8, 1.2)

        body = superellipsoid_points(a, b, c, e1, e2, spec.grid)
        base = _base_points(base_r, -c - 0.15, spec.base_rings)
        parts = [body, base]
        labels = [np.full(n_body, BODY), np.full(n_base, BASE)]
        if has_comp:
            radii = np.array([0.35 * a, 0.18, 0.2 * c]) * comp_size
            center = np.array([0.0, b + 0.6 * radii[1], 0.1 * c])
            comp = _component_points(center, radii, spec.component_grid)
            parts.append(comp)
            labels.append(np.full(len(comp), COMPONENT))
        points = np.concatenate(parts)
        labels_arr = np.concatenate(labels)
        ids = np.arange(len(points))
        keypoints = {kid: body[idx].copy() for kid, idx in extremes.items()}
        keypoints[6] = base[1 + sum(spec.base_rings[:-1]) + 0].copy()  # rim at +x
        keypoints[7] = base[1 + sum(spec.base_rings[:-1]) + outer // 2].copy()  # rim at -x
        clouds.append(
            PointCloud(points, labels=labels_arr, keypoints=keypoints, corr_ids=ids, name=f"shape_{i:04d}")
        )
    return Dataset(clouds, category="superellipsoid")


def synth_spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
