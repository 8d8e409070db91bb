"""Dataset ingestion: simple point formats, OFF meshes, ASCII PLY, room
block splitting, a manifest format, and synthetic shapes for small-scale
experiments."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError
from .geometry import PointSet, normalize_cloud
from .tensor import Tensor


@dataclass
class LabeledCloud:
    """A cloud plus its class id (classification) or per-point labels."""

    cloud: PointSet
    label: int | np.ndarray | None
    name: str = ""

    def __post_init__(self):
        if isinstance(self.label, np.ndarray):
            self.label = np.asarray(self.label, dtype=np.intp)
            if len(self.label) != len(self.cloud):
                raise InputError(
                    f"{len(self.label)} point labels for {len(self.cloud)} points")
        elif self.label is not None:
            self.label = int(self.label)


# ---------------------------------------------------------------------------
# Text point formats
# ---------------------------------------------------------------------------

_SCHEMA_PREFIX = "#cols:"


def load_xyz(path, schema: list[str] | None = None) -> LabeledCloud:
    """Whitespace-separated rows of numbers, one point per row.

    Column roles come from ``schema`` or a leading ``#cols: x y z ...``
    line; bare three-column files default to x y z. Any column that is
    not x/y/z/label becomes a feature channel, in file order.
    """
    path = Path(path)
    rows: list[list[float]] = []
    file_schema = None
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith(_SCHEMA_PREFIX):
                file_schema = line[len(_SCHEMA_PREFIX):].split()
                continue
            if line.startswith("#"):
                continue
            tokens = line.split()
            try:
                values = [float(tok) for tok in tokens]
            except ValueError:
                raise ParseError(f"non-numeric token in {path.name}", line=lineno)
            if rows and len(values) != len(rows[-1]):
                raise ParseError(
                    f"ragged row: {len(values)} columns, expected {len(rows[-1])}",
                    line=lineno)
            rows.append(values)
    if not rows:
        raise ParseError(f"{path.name} holds no points")
    schema = schema or file_schema
    width = len(rows[0])
    if schema is None:
        if width != 3:
            raise ParseError(
                f"{path.name} has {width} columns; provide a schema "
                f"('{_SCHEMA_PREFIX} x y z ...')")
        schema = ["x", "y", "z"]
    if len(schema) != width:
        raise ParseError(f"schema names {len(schema)} columns, file has {width}")
    for axis in ("x", "y", "z"):
        if axis not in schema:
            raise ParseError(f"schema is missing column {axis!r}")
    data = np.asarray(rows, dtype=np.float64)
    coords = data[:, [schema.index("x"), schema.index("y"), schema.index("z")]]
    feature_cols = [i for i, name in enumerate(schema) if name not in ("x", "y", "z", "label")]
    features = Tensor(data[:, feature_cols]) if feature_cols else None
    label = None
    if "label" in schema:
        label = data[:, schema.index("label")].astype(np.intp)
    return LabeledCloud(PointSet(coords, features), label, name=path.stem)


def load_ply(path) -> LabeledCloud:
    """ASCII PLY with x/y/z properties, plus red/green/blue when present."""
    path = Path(path)
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path.name} is not a PLY file", line=1)
    n_vertices = None
    props: list[str] = []
    body_start = None
    in_vertex_element = False
    for i, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", line=i)
        elif tokens[0] == "element":
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                n_vertices = int(tokens[2])
        elif tokens[0] == "property" and in_vertex_element:
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = i
            break
    if n_vertices is None or body_start is None:
        raise ParseError(f"{path.name} header is missing a vertex element")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise ParseError(f"{path.name} vertices lack property {axis!r}")
    rows = []
    for lineno in range(body_start, body_start + n_vertices):
        if lineno >= len(lines):
            raise ParseError("vertex list ends early", line=lineno + 1)
        try:
            rows.append([float(tok) for tok in lines[lineno].split()])
        except ValueError:
            raise ParseError("non-numeric vertex data", line=lineno + 1)
    data = np.asarray(rows, dtype=np.float64)
    coords = data[:, [props.index("x"), props.index("y"), props.index("z")]]
    features = None
    if all(c in props for c in ("red", "green", "blue")):
        rgb = data[:, [props.index("red"), props.index("green"), props.index("blue")]]
        features = Tensor(rgb / 255.0)
    return LabeledCloud(PointSet(coords, features), None, name=path.stem)


# ---------------------------------------------------------------------------
# OFF meshes
# ---------------------------------------------------------------------------


def load_off(path, samples: int, seed: int = 0, normalize: bool = True) -> PointSet:
    """Area-weighted uniform surface sampling of a triangulated OFF mesh,
    normalized to the unit sphere. Quads are fan-triangulated; zero-area
    faces are skipped with a warning."""
    path = Path(path)
    with open(path) as f:
        tokens_per_line = [(i + 1, line.split("#")[0].split())
                           for i, line in enumerate(f.read().splitlines())]
    stream = [(lineno, tok) for lineno, toks in tokens_per_line for tok in toks]
    if not stream:
        raise ParseError(f"{path.name} is empty")
    pos = 0
    first_line, first = stream[0]
    if first == "OFF":
        pos = 1
    elif first.startswith("OFF"):  # header glued to the counts
        stream[0] = (first_line, first[3:])
    else:
        raise ParseError(f"{path.name} does not start with OFF", line=first_line)

    def take(n):
        nonlocal pos
        if pos + n > len(stream):
            raise ParseError(f"{path.name} ends early", line=stream[-1][0])
        out = stream[pos:pos + n]
        pos += n
        return out

    header = take(3)
    try:
        n_vertices, n_faces = int(header[0][1]), int(header[1][1])
    except ValueError:
        raise ParseError("bad vertex/face counts", line=header[0][0])
    vertex_tokens = take(3 * n_vertices)
    try:
        vertices = np.array([float(tok) for _, tok in vertex_tokens]).reshape(n_vertices, 3)
    except ValueError:
        raise ParseError("non-numeric vertex coordinate", line=vertex_tokens[0][0])
    triangles = []
    for _ in range(n_faces):
        (lineno, count_tok), = take(1)
        try:
            arity = int(count_tok)
        except ValueError:
            raise ParseError("bad face arity", line=lineno)
        idx = [int(tok) for _, tok in take(arity)]
        if any(i < 0 or i >= n_vertices for i in idx):
            raise ParseError(f"face references vertex outside 0..{n_vertices - 1}",
                             line=lineno)
        for k in range(1, arity - 1):  # fan triangulation
            triangles.append((idx[0], idx[k], idx[k + 1]))
    tri = np.asarray(triangles, dtype=np.intp)
    a, b, c = vertices[tri[:, 0]], vertices[tri[:, 1]], vertices[tri[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if np.any(areas == 0):
        warnings.warn(f"{path.name}: skipping {int(np.sum(areas == 0))} zero-area faces")
    keep = areas > 0
    if not keep.any():
        raise ParseError(f"{path.name} has no faces with positive area")
    a, b, c, areas = a[keep], b[keep], c[keep], areas[keep]
    rng = np.random.default_rng(seed)
    face_ids = rng.choice(len(areas), size=samples, p=areas / areas.sum())
    u = rng.random(samples)
    v = rng.random(samples)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    points = (a[face_ids] + u[:, None] * (b[face_ids] - a[face_ids])
              + v[:, None] * (c[face_ids] - a[face_ids]))
    cloud = PointSet(points)
    return normalize_cloud(cloud) if normalize else cloud


# ---------------------------------------------------------------------------
# Scene block splitting
# ---------------------------------------------------------------------------


def split_blocks(scene: LabeledCloud, block: float = 1.0, stride: float | None = None,
                 min_points: int = 32) -> list[LabeledCloud]:
    """Tile the XY plane into block x block columns (full height).

    Each retained block's features gain three room-relative location
    channels (coordinate minus room minimum, divided by the room extent
    per axis). Blocks with fewer than ``min_points`` points are dropped.
    The default stride equals the block, a disjoint partition.
    """
    if len(scene.cloud) == 0:
        raise InputError("scene is empty")
    stride = block if stride is None else stride
    if block <= 0 or stride <= 0:
        raise InputError("block and stride must be positive")
    coords = scene.cloud.coords
    room_min = coords.min(axis=0)
    extent = np.maximum(coords.max(axis=0) - room_min, 1e-12)
    normalized_location = (coords - room_min) / extent
    base = scene.cloud.features.values if scene.cloud.features is not None else \
        np.empty((len(coords), 0))
    features = np.hstack([base, normalized_location])
    span = coords[:, :2].max(axis=0) - room_min[:2]
    steps_x = max(1, int(np.floor(span[0] / stride)) + 1)
    steps_y = max(1, int(np.floor(span[1] / stride)) + 1)
    blocks = []
    for ix in range(steps_x):
        for iy in range(steps_y):
            lo = room_min[:2] + np.array([ix, iy]) * stride
            hi = lo + block
            inside = np.all((coords[:, :2] >= lo) & (coords[:, :2] < hi), axis=1)
            if int(inside.sum()) < min_points:
                continue
            label = scene.label[inside] if isinstance(scene.label, np.ndarray) else scene.label
            blocks.append(LabeledCloud(
                PointSet(coords[inside], Tensor(features[inside])),
                label, name=f"{scene.name}_x{ix}y{iy}"))
    return blocks


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_KINDS = ("sphere", "cube", "cylinder", "plane", "torus")

_CYL_RADIUS = 0.5
_CYL_HALF_HEIGHT = 0.75
PART_WALL = 0
PART_CAP = 1


@dataclass
class SyntheticShapeSpec:
    kind: str
    n_points: int = 256
    noise_std: float = 0.0
    seed: int = 0
    part_labels: bool = False

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise InputError(f"unknown shape {self.kind!r}; choose from {SHAPE_KINDS}")
        if self.n_points < 8:
            raise InputError(f"need at least 8 points, got {self.n_points}")
        if self.noise_std < 0:
            raise InputError("noise std must be >= 0")
        if self.part_labels and self.kind != "cylinder":
            raise InputError("part labels are defined for the cylinder only")


def _sample_sphere(rng, n):
    g = rng.standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _sample_cube(rng, n, half=0.7):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-half, half, (n, 2))
    points = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, half, -half)
    for i in range(n):
        others = [a for a in range(3) if a != axis[i]]
        points[i, axis[i]] = sign[i]
        points[i, others] = uv[i]
    return points


def _sample_cylinder(rng, n):
    wall_area = 2 * np.pi * _CYL_RADIUS * 2 * _CYL_HALF_HEIGHT
    cap_area = 2 * np.pi * _CYL_RADIUS**2
    on_wall = rng.random(n) < wall_area / (wall_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    points = np.empty((n, 3))
    labels = np.where(on_wall, PART_WALL, PART_CAP).astype(np.intp)
    z = rng.uniform(-_CYL_HALF_HEIGHT, _CYL_HALF_HEIGHT, n)
    r = _CYL_RADIUS * np.sqrt(rng.random(n))
    points[:, 0] = np.where(on_wall, _CYL_RADIUS, r) * np.cos(theta)
    points[:, 1] = np.where(on_wall, _CYL_RADIUS, r) * np.sin(theta)
    cap_side = np.where(rng.random(n) < 0.5, _CYL_HALF_HEIGHT, -_CYL_HALF_HEIGHT)
    points[:, 2] = np.where(on_wall, z, cap_side)
    return points, labels


def _sample_plane(rng, n, half=0.8):
    points = np.zeros((n, 3))
    points[:, :2] = rng.uniform(-half, half, (n, 2))
    return points


def _sample_torus(rng, n, big=0.7, small=0.25):
    points = np.empty((n, 3))
    filled = 0
    while filled < n:
        want = n - filled
        u = rng.uniform(0, 2 * np.pi, want)
        v = rng.uniform(0, 2 * np.pi, want)
        accept = rng.random(want) < (big + small * np.cos(v)) / (big + small)
        u, v = u[accept], v[accept]
        m = len(u)
        points[filled:filled + m, 0] = (big + small * np.cos(v)) * np.cos(u)
        points[filled:filled + m, 1] = (big + small * np.cos(v)) * np.sin(u)
        points[filled:filled + m, 2] = small * np.sin(v)
        filled += m
    return points


def generate_synthetic(spec: SyntheticShapeSpec) -> LabeledCloud:
    """Analytic surface sampling plus Gaussian noise, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    labels = None
    if spec.kind == "sphere":
        points = _sample_sphere(rng, spec.n_points)
    elif spec.kind == "cube":
        points = _sample_cube(rng, spec.n_points)
    elif spec.kind == "cylinder":
        points, labels = _sample_cylinder(rng, spec.n_points)
    elif spec.kind == "plane":
        points = _sample_plane(rng, spec.n_points)
    else:
        points = _sample_torus(rng, spec.n_points)
    if spec.noise_std > 0:
        points = points + rng.normal(0.0, spec.noise_std, points.shape)
    label = labels if spec.part_labels else None
    return LabeledCloud(PointSet(points), label,
                        name=f"{spec.kind}_{spec.seed}")


def classification_dataset(
    n_train: int, n_test: int, n_points: int = 256, noise_std: float = 0.02,
    seed: int = 0, kinds: tuple[str, ...] = ("sphere", "cube", "cylinder"),
) -> tuple[list[LabeledCloud], list[LabeledCloud]]:
    """Balanced shape-classification sets; class id = index into ``kinds``."""
    def build(count, base):
        out = []
        for i in range(count):
            class_id = i % len(kinds)
            sample = generate_synthetic(SyntheticShapeSpec(
                kinds[class_id], n_points, noise_std, seed=base + i))
            out.append(LabeledCloud(sample.cloud, class_id, name=sample.name))
        return out

    return build(n_train, seed * 1_000_003), build(n_test, seed * 1_000_003 + n_train)


def segmentation_dataset(
    n_train: int, n_test: int, n_points: int = 512, noise_std: float = 0.02,
    seed: int = 0,
) -> tuple[list[LabeledCloud], list[LabeledCloud]]:
    """Cylinder wall-vs-caps two-part sets with per-point labels."""
    def build(count, base):
        return [generate_synthetic(SyntheticShapeSpec(
            "cylinder", n_points, noise_std, seed=base + i, part_labels=True))
            for i in range(count)]

    return build(n_train, seed * 2_000_003), build(n_test, seed * 2_000_003 + n_train)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    name: str
    path: Path
    split: str
    label: int | None


def load_manifest(path) -> list[ManifestEntry]:
    """CSV with header name,path,split,label; label may be empty."""
    path = Path(path)
    entries = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        expected = {"name", "path", "split", "label"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise ParseError(
                f"manifest header must be name,path,split,label, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            label = row["label"].strip()
            entries.append(ManifestEntry(
                name=row["name"],
                path=path.parent / row["path"],
                split=row["split"].strip(),
                label=int(label) if label else None,
            ))
    return entries


def modelnet_manifest(root, out_path) -> int:
    """Generate a manifest over the public class/split/model.off layout.

    Class ids follow the sorted class-directory order. Returns the number
    of rows written; downloading the dataset itself is out of scope.
    """
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise InputError(f"{root} holds no class directories")
    rows = []
    for label, cls in enumerate(classes):
        for split in ("train", "test"):
            for mesh in sorted((root / cls / split).glob("*.off")):
                rows.append((mesh.stem, mesh.relative_to(Path(out_path).parent),
                             split, label))
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "path", "split", "label"])
        writer.writerows(rows)
    return len(rows)


def load_manifest_dataset(path, samples: int = 1024,
                          seed: int = 0) -> dict[str, list[LabeledCloud]]:
    """Load every manifest entry, dispatching on file extension, grouped by split."""
    out: dict[str, list[LabeledCloud]] = {}
    for entry in load_manifest(path):
        suffix = entry.path.suffix.lower()
        if suffix == ".off":
            item = LabeledCloud(load_off(entry.path, samples, seed), entry.label,
                                name=entry.name)
        elif suffix == ".ply":
            loaded = load_ply(entry.path)
            item = LabeledCloud(loaded.cloud,
                                entry.label if entry.label is not None else loaded.label,
                                name=entry.name)
        else:
            loaded = load_xyz(entry.path)
            label = entry.label if entry.label is not None else loaded.label
            item = LabeledCloud(loaded.cloud, label, name=entry.name)
        out.setdefault(entry.split, []).append(item)
    return out
