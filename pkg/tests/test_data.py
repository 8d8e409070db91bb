import numpy as np
import pytest

from interpcnn.data import (
    LabeledCloud,
    ManifestEntry,
    SyntheticShapeSpec,
    classification_dataset,
    generate_synthetic,
    load_manifest,
    load_manifest_dataset,
    load_off,
    load_ply,
    load_xyz,
    segmentation_dataset,
    split_blocks,
)
from interpcnn.errors import InputError, ParseError
from interpcnn.geometry import PointSet

CUBE_OFF = """OFF
8 12 0
-0.5 -0.5 -0.5
 0.5 -0.5 -0.5
 0.5  0.5 -0.5
-0.5  0.5 -0.5
-0.5 -0.5  0.5
 0.5 -0.5  0.5
 0.5  0.5  0.5
-0.5  0.5  0.5
3 0 2 1
3 0 3 2
3 4 5 6
3 4 6 7
3 0 1 5
3 0 5 4
3 2 3 7
3 2 7 6
3 1 2 6
3 1 6 5
3 3 0 4
3 3 4 7
"""


# ---------------------------------------------------------------------------
# XYZ text
# ---------------------------------------------------------------------------


def test_load_xyz_bare(tmp_path):
    path = tmp_path / "p.xyz"
    path.write_text("0 0 0\n1 0 0\n0 1 0\n")
    item = load_xyz(path)
    assert len(item.cloud) == 3
    assert item.cloud.features is None
    assert item.label is None


def test_load_xyz_schema_line(tmp_path):
    path = tmp_path / "p.xyz"
    path.write_text("#cols: x y z r g b label\n"
                    "0 0 0 0.1 0.2 0.3 1\n"
                    "1 1 1 0.4 0.5 0.6 0\n")
    item = load_xyz(path)
    assert item.cloud.features.shape == (2, 3)
    assert np.allclose(item.cloud.features.values[0], [0.1, 0.2, 0.3])
    assert item.label.tolist() == [1, 0]


def test_load_xyz_errors_cite_line_numbers(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n1 0 0\n2 0 0\n3 0 0\nnot a number 0\n")
    with pytest.raises(ParseError, match="line 5"):
        load_xyz(path)
    ragged = tmp_path / "ragged.xyz"
    ragged.write_text("0 0 0\n1 0\n")
    with pytest.raises(ParseError, match="line 2"):
        load_xyz(ragged)
    wide = tmp_path / "wide.xyz"
    wide.write_text("0 0 0 9\n")
    with pytest.raises(ParseError, match="schema"):
        load_xyz(wide)


# ---------------------------------------------------------------------------
# OFF meshes
# ---------------------------------------------------------------------------


def test_off_single_triangle_points_inside(tmp_path):
    path = tmp_path / "tri.off"
    path.write_text("OFF\n3 1 0\n0 0 0\n2 0 0\n0 3 0\n3 0 1 2\n")
    cloud = load_off(path, samples=100, seed=0, normalize=False)
    assert len(cloud) == 100
    # barycentric containment in the original triangle
    a, b, c = np.array([0, 0, 0.0]), np.array([2, 0, 0.0]), np.array([0, 3, 0.0])
    m = np.column_stack([(b - a)[:2], (c - a)[:2]])
    uv = np.linalg.solve(m, (cloud.coords[:, :2] - a[:2]).T).T
    assert np.all(uv >= -1e-12)
    assert np.all(uv.sum(axis=1) <= 1 + 1e-12)
    assert np.allclose(cloud.coords[:, 2], 0.0)


def test_off_default_normalizes():
    import io, tempfile, os
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "cube.off")
        with open(path, "w") as f:
            f.write(CUBE_OFF)
        cloud = load_off(path, samples=500, seed=1)
    assert abs(np.linalg.norm(cloud.coords, axis=1).max() - 1.0) < 1e-12


def test_off_cube_sampling_is_area_uniform(tmp_path):
    path = tmp_path / "cube.off"
    path.write_text(CUBE_OFF)
    cloud = load_off(path, samples=6000, seed=2, normalize=False)
    # classify each point by the face it sits on (coordinate pinned at +-0.5)
    counts = []
    for axis in range(3):
        for side in (-0.5, 0.5):
            counts.append(int(np.sum(np.isclose(cloud.coords[:, axis], side))))
    assert sum(counts) == 6000
    sigma = np.sqrt(6000 * (1 / 6) * (5 / 6))
    for count in counts:
        assert abs(count - 1000) <= 3 * sigma


def test_off_degenerate_face_warns_and_proceeds(tmp_path):
    path = tmp_path / "degen.off"
    path.write_text("OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n2 0 0\n3 0 1 2\n3 0 1 3\n")
    with pytest.warns(UserWarning, match="zero-area"):
        cloud = load_off(path, samples=50, seed=0, normalize=False)
    assert len(cloud) == 50


def test_off_parse_errors(tmp_path):
    bad_header = tmp_path / "h.off"
    bad_header.write_text("PLY\n1 0 0\n0 0 0\n")
    with pytest.raises(ParseError, match="OFF"):
        load_off(bad_header, 10)
    bad_index = tmp_path / "i.off"
    bad_index.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n")
    with pytest.raises(ParseError, match="vertex"):
        load_off(bad_index, 10)


def test_off_quads_are_triangulated(tmp_path):
    path = tmp_path / "quad.off"
    path.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    cloud = load_off(path, samples=200, seed=3, normalize=False)
    assert np.all(cloud.coords[:, 0] >= -1e-12) and np.all(cloud.coords[:, 0] <= 1 + 1e-12)
    assert np.all(cloud.coords[:, 1] >= -1e-12) and np.all(cloud.coords[:, 1] <= 1 + 1e-12)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def test_load_ply_ascii_with_rgb(tmp_path):
    path = tmp_path / "p.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
        "0 0 0 255 0 0\n"
        "1 2 3 0 255 0\n")
    item = load_ply(path)
    assert np.allclose(item.cloud.coords[1], [1, 2, 3])
    assert np.allclose(item.cloud.features.values[0], [1.0, 0.0, 0.0])


def test_load_ply_rejects_binary(tmp_path):
    path = tmp_path / "b.ply"
    path.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(ParseError, match="ASCII"):
        load_ply(path)


# ---------------------------------------------------------------------------
# Block splitting
# ---------------------------------------------------------------------------


def scene_cloud(coords, labels=None):
    coords = np.asarray(coords, dtype=float)
    return LabeledCloud(PointSet(coords),
                        np.asarray(labels, dtype=np.intp) if labels is not None else None,
                        name="scene")


def test_split_blocks_tiles_two_blocks():
    rng = np.random.default_rng(0)
    coords = rng.uniform([0, 0, 0], [2, 1, 3], (400, 3))
    labels = rng.integers(0, 4, 400)
    blocks = split_blocks(scene_cloud(coords, labels), block=1.0)
    assert len(blocks) == 2
    total = sum(len(b.cloud) for b in blocks)
    assert total == 400  # stride == block partitions retained points
    for b in blocks:
        assert b.cloud.features.shape[1] == 3  # normalized-location channels
        assert b.cloud.features.values.min() >= 0.0
        assert b.cloud.features.values.max() <= 1.0


def test_split_blocks_single_corner_block():
    coords = np.random.default_rng(1).uniform(0, 0.4, (64, 3))
    blocks = split_blocks(scene_cloud(coords), block=1.0)
    assert len(blocks) == 1
    assert len(blocks[0].cloud) == 64


def test_split_blocks_drops_sparse_blocks():
    coords = np.vstack([
        np.random.default_rng(2).uniform(0, 0.9, (100, 3)),
        np.array([[1.5, 0.5, 0.0]] * 5),  # 5 points in the second column
    ])
    blocks = split_blocks(scene_cloud(coords), block=1.0, min_points=32)
    assert len(blocks) == 1
    assert len(blocks[0].cloud) == 100


def test_split_blocks_partition_property():
    rng = np.random.default_rng(3)
    coords = rng.uniform(0, 3, (900, 3))
    scene = scene_cloud(coords, rng.integers(0, 2, 900))
    blocks = split_blocks(scene, block=1.0, min_points=1)
    stacked = np.vstack([b.cloud.coords for b in blocks])
    assert len(stacked) == 900
    seen = {tuple(np.round(row, 12)) for row in stacked}
    want = {tuple(np.round(row, 12)) for row in coords}
    assert seen == want


def test_split_blocks_rejects_empty():
    with pytest.raises(InputError):
        split_blocks(scene_cloud(np.zeros((0, 3)).reshape(0, 3)), 1.0)


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


def test_sphere_points_on_unit_sphere():
    item = generate_synthetic(SyntheticShapeSpec("sphere", 64, 0.0, seed=0))
    norms = np.linalg.norm(item.cloud.coords, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-12


def test_cube_points_on_surface():
    item = generate_synthetic(SyntheticShapeSpec("cube", 64, 0.0, seed=1))
    on_face = np.isclose(np.abs(item.cloud.coords), 0.7).any(axis=1)
    assert on_face.all()


def test_cylinder_part_labels_by_height():
    item = generate_synthetic(SyntheticShapeSpec(
        "cylinder", 256, 0.0, seed=2, part_labels=True))
    z = item.cloud.coords[:, 2]
    caps = item.label == 1
    assert np.allclose(np.abs(z[caps]), 0.75)
    assert np.all(np.abs(z[~caps]) <= 0.75)
    radial = np.linalg.norm(item.cloud.coords[~caps, :2], axis=1)
    assert np.allclose(radial, 0.5)


def test_torus_and_plane_generate():
    torus = generate_synthetic(SyntheticShapeSpec("torus", 64, 0.0, seed=3))
    ring = np.linalg.norm(torus.cloud.coords[:, :2], axis=1)
    d = np.sqrt((ring - 0.7) ** 2 + torus.cloud.coords[:, 2] ** 2)
    assert np.allclose(d, 0.25, atol=1e-12)
    plane = generate_synthetic(SyntheticShapeSpec("plane", 64, 0.0, seed=4))
    assert np.allclose(plane.cloud.coords[:, 2], 0.0)


def test_synthetic_determinism_and_validation():
    a = generate_synthetic(SyntheticShapeSpec("sphere", 32, 0.05, seed=9))
    b = generate_synthetic(SyntheticShapeSpec("sphere", 32, 0.05, seed=9))
    assert np.array_equal(a.cloud.coords, b.cloud.coords)
    with pytest.raises(InputError):
        SyntheticShapeSpec("pyramid", 32)
    with pytest.raises(InputError):
        SyntheticShapeSpec("sphere", 4)
    with pytest.raises(InputError):
        SyntheticShapeSpec("sphere", 32, part_labels=True)


def test_classification_dataset_balanced_and_disjoint():
    train, test = classification_dataset(9, 6, n_points=32, seed=0)
    assert [t.label for t in train] == [0, 1, 2] * 3
    assert len(test) == 6
    train_coords = {a.cloud.coords.tobytes() for a in train}
    test_coords = {a.cloud.coords.tobytes() for a in test}
    assert not train_coords & test_coords


def test_segmentation_dataset_labels():
    train, test = segmentation_dataset(2, 1, n_points=64, seed=0)
    for item in train + test:
        assert isinstance(item.label, np.ndarray)
        assert set(np.unique(item.label)) <= {0, 1}


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    (tmp_path / "a.xyz").write_text("0 0 0\n1 0 0\n0 1 0\n0 0 1\n1 1 0\n1 0 1\n0 1 1\n1 1 1\n")
    (tmp_path / "b.xyz").write_text("#cols: x y z label\n" + "".join(
        f"0 0 {i} {i % 2}\n" for i in range(8)))
    manifest = tmp_path / "data.csv"
    manifest.write_text("name,path,split,label\n"
                        "a,a.xyz,train,1\n"
                        "b,b.xyz,test,\n")
    entries = load_manifest(manifest)
    assert entries[0] == ManifestEntry("a", tmp_path / "a.xyz", "train", 1)
    assert entries[1].label is None
    splits = load_manifest_dataset(manifest)
    assert splits["train"][0].label == 1
    assert splits["test"][0].label.tolist() == [0, 1] * 4


def test_manifest_rejects_bad_header(tmp_path):
    manifest = tmp_path / "bad.csv"
    manifest.write_text("name,file,split\nx,y,train\n")
    with pytest.raises(ParseError, match="header"):
        load_manifest(manifest)


def test_modelnet_layout_manifest(tmp_path):
    from interpcnn.data import modelnet_manifest

    tri = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"
    for cls in ("chair", "airplane"):
        for split in ("train", "test"):
            d = tmp_path / "modelnet" / cls / split
            d.mkdir(parents=True)
            (d / f"{cls}_0001.off").write_text(tri)
    manifest = tmp_path / "modelnet" / "manifest.csv"
    rows = modelnet_manifest(tmp_path / "modelnet", manifest)
    assert rows == 4
    entries = load_manifest(manifest)
    # sorted class order: airplane -> 0, chair -> 1
    labels = {e.name.rsplit("_", 1)[0]: e.label for e in entries}
    assert labels == {"airplane": 0, "chair": 1}
    splits = load_manifest_dataset(manifest, samples=32)
    assert len(splits["train"]) == 2 and len(splits["test"]) == 2
    assert all(len(item.cloud) == 32 for item in splits["train"])
