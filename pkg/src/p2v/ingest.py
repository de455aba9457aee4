"""Scene loading: manifests, point files, mesh files, and dataset splits.

A dataset is a directory of scene subdirectories, each holding a
``manifest.json`` that lists instances backed either by a binary point
file or by a face group of the scene mesh. See docs/dataset-format.md
for the byte-level layout.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .errors import DatasetError, InvalidInputError

log = logging.getLogger(__name__)

POINTS_MAGIC = b"P2VC"

SPLIT_NAMES = ("train", "validation", "test")


@dataclass
class InstanceRecord:
    """One segmented object: centered cloud plus its original scene position.

    The label is carried for evaluation only; nothing on the training
    path reads it.
    """

    scene_id: str
    instance_id: str
    label: str | None
    centroid: np.ndarray  # (3,) float64, scene-frame position of the removed mean
    cloud: np.ndarray  # (N, 3) float32, centered


@dataclass
class Dataset:
    instances: list = field(default_factory=list)
    split: dict = field(default_factory=dict)  # scene_id -> train|validation|test

    def __post_init__(self):
        for rec in self.instances:
            if rec.scene_id not in self.split:
                raise InvalidInputError(f"scene {rec.scene_id!r} missing from split")
        for name in self.split.values():
            if name not in SPLIT_NAMES:
                raise InvalidInputError(f"unknown split name {name!r}")

    def subset(self, split_name):
        """Instances whose scene is assigned to `split_name` ('all' for everything)."""
        if split_name in (None, "all"):
            return list(self.instances)
        if split_name not in SPLIT_NAMES:
            raise InvalidInputError(f"unknown split name {split_name!r}")
        return [r for r in self.instances if self.split[r.scene_id] == split_name]

    def scene_ids(self):
        return sorted(self.split)


def instance_seed(rng_seed, scene_id, instance_id):
    """Stable per-instance seed, independent of load order."""
    digest = hashlib.sha256(f"{rng_seed}:{scene_id}:{instance_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def write_points_file(path, points):
    """Write an (N, 3) array as magic P2VC + uint32 N + N*3 little-endian float32."""
    pts = np.ascontiguousarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"points must have shape (N, 3), got {pts.shape}")
    with open(path, "wb") as fh:
        fh.write(POINTS_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.tobytes())


def read_points_file(path):
    """Read a P2VC point file back into an (N, 3) float32 array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read point file {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != POINTS_MAGIC:
        raise DatasetError(f"{path}: not a P2VC point file")
    (n,) = struct.unpack("<I", raw[4:8])
    expected = 8 + 12 * n
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for {n} points, got {len(raw)}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(n, 3).copy()


def write_mesh_file(path, mesh):
    """Write a TriangleMesh as the ASCII mesh format (one file per scene)."""
    lines = [
        "ply",
        "format ascii 1.0",
        "comment p2v-mesh 1",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "property int instance",
        "end_header",
    ]
    for v in mesh.vertices:
        lines.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for f, g in zip(mesh.faces, mesh.face_instance_ids):
        lines.append(f"3 {int(f[0])} {int(f[1])} {int(f[2])} {int(g)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh_file(path):
    """Parse the ASCII mesh format; quadrilateral faces split along the 0-2 diagonal."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read mesh file {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DatasetError(f"{path}: missing ply header")
    n_vert = n_face = None
    body = 0
    for i, line in enumerate(lines):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            n_vert = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            n_face = int(tok[2])
        elif tok and tok[0] == "end_header":
            body = i + 1
            break
    else:
        raise DatasetError(f"{path}: no end_header")
    if n_vert is None or n_face is None:
        raise DatasetError(f"{path}: missing vertex/face element declarations")
    if len(lines) < body + n_vert + n_face:
        raise DatasetError(f"{path}: truncated body")

    verts = np.empty((n_vert, 3), dtype=np.float64)
    for i in range(n_vert):
        tok = lines[body + i].split()
        if len(tok) != 3:
            raise DatasetError(f"{path}: bad vertex line {body + i + 1}")
        verts[i] = [float(t) for t in tok]

    faces = []
    groups = []
    for i in range(n_face):
        tok = lines[body + n_vert + i].split()
        if not tok:
            raise DatasetError(f"{path}: bad face line {body + n_vert + i + 1}")
        count = int(tok[0])
        if len(tok) != count + 2 or count not in (3, 4):
            raise DatasetError(f"{path}: bad face line {body + n_vert + i + 1}")
        idx = [int(t) for t in tok[1 : 1 + count]]
        group = int(tok[1 + count])
        if count == 3:
            faces.append(idx)
            groups.append(group)
        else:  # quad -> two triangles along the fixed 0-2 diagonal
            faces.append([idx[0], idx[1], idx[2]])
            faces.append([idx[0], idx[2], idx[3]])
            groups.extend([group, group])
    return geometry.TriangleMesh(verts, np.array(faces), np.array(groups))


def _fit_point_count(points, target, rng):
    """Resize a cloud to exactly `target` points.

    Short clouds keep every original point and append draws with
    replacement; long clouds are subsampled without replacement.
    """
    n = len(points)
    if n == target:
        return points
    if n < target:
        extra = rng.choice(n, size=target - n, replace=True)
        return np.concatenate([points, points[extra]], axis=0)
    keep = rng.choice(n, size=target, replace=False)
    return points[keep]


def _finish_record(scene_id, entry, raw_points, points_per_instance, rng_seed, pre_centered=None):
    instance_id = entry["instance_id"]
    rng = np.random.default_rng(instance_seed(rng_seed, scene_id, instance_id))
    pts = np.asarray(raw_points, dtype=np.float64)
    n_raw = len(pts)
    if n_raw == 0:
        log.warning("skipping %s/%s: no points", scene_id, instance_id)
        return None
    pts = _fit_point_count(pts, points_per_instance, rng)
    if len(np.unique(pts.round(decimals=9), axis=0)) < 4:
        log.warning("skipping %s/%s: fewer than 4 distinct points", scene_id, instance_id)
        return None
    if pre_centered is not None and n_raw == points_per_instance:
        # Stored cloud is already centered and untouched: exact passthrough.
        centroid = np.asarray(pre_centered, dtype=np.float64)
        centered = pts
    else:
        centered, centroid = geometry.center(pts)
        if pre_centered is not None:
            centroid = centroid + np.asarray(pre_centered, dtype=np.float64)
    return InstanceRecord(
        scene_id=scene_id,
        instance_id=instance_id,
        label=entry.get("label"),
        centroid=centroid,
        cloud=centered.astype(np.float32),
    )


def load_scene(scene_dir, points_per_instance, rng_seed):
    """Load one scene directory into centered, fixed-size instance records.

    Instances with no geometry or fewer than four distinct points are
    skipped with a warning. Deterministic given the seed.
    """
    scene_dir = Path(scene_dir)
    manifest_path = scene_dir / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"no manifest.json in {scene_dir}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except ValueError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON: {exc}") from exc
    scene_id = manifest.get("scene_id")
    if not scene_id or "instances" not in manifest:
        raise DatasetError(f"{manifest_path}: needs scene_id and instances")

    meshes = {}
    records = []
    for entry in manifest["instances"]:
        if "instance_id" not in entry:
            raise DatasetError(f"{manifest_path}: instance without instance_id")
        if "points_file" in entry:
            pts = read_points_file(scene_dir / entry["points_file"])
            rec = _finish_record(
                scene_id, entry, pts, points_per_instance, rng_seed,
                pre_centered=entry.get("centroid"),
            )
        elif "mesh_ref" in entry:
            ref = entry["mesh_ref"]
            mesh_file = ref["file"]
            if mesh_file not in meshes:
                meshes[mesh_file] = read_mesh_file(scene_dir / mesh_file)
            mesh = meshes[mesh_file]
            group = int(ref["face_group"])
            if not (mesh.face_instance_ids == group).any():
                log.warning("skipping %s/%s: no faces", scene_id, entry["instance_id"])
                continue
            try:
                pts = geometry.sample_surface(
                    mesh, group, points_per_instance,
                    instance_seed(rng_seed, scene_id, entry["instance_id"]),
                )
            except InvalidInputError as exc:
                log.warning("skipping %s/%s: %s", scene_id, entry["instance_id"], exc)
                continue
            rec = _finish_record(scene_id, entry, pts, points_per_instance, rng_seed)
        else:
            raise DatasetError(
                f"{manifest_path}: instance {entry['instance_id']!r} needs points_file or mesh_ref"
            )
        if rec is not None:
            records.append(rec)
    return records


def make_split(scene_ids, n_val, n_test, rng_seed):
    """Assign whole scenes to train/validation/test, deterministically per seed."""
    scene_ids = sorted(scene_ids)
    if n_val < 0 or n_test < 0:
        raise InvalidInputError("n_val and n_test must be nonnegative")
    if n_val + n_test >= len(scene_ids):
        raise InvalidInputError(
            f"need n_val + n_test < scenes, got {n_val}+{n_test} with {len(scene_ids)} scenes"
        )
    order = np.random.default_rng(rng_seed).permutation(len(scene_ids))
    split = {}
    for rank, idx in enumerate(order):
        if rank < n_test:
            split[scene_ids[idx]] = "test"
        elif rank < n_test + n_val:
            split[scene_ids[idx]] = "validation"
        else:
            split[scene_ids[idx]] = "train"
    return split


def scan_scene_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
    if not dirs:
        raise DatasetError(f"no scene manifests under {root}")
    return dirs


def load_dataset(root, points_per_instance, rng_seed, n_val=1, n_test=1):
    """Load every scene under `root` and attach a split.

    Uses `root/split.json` when present (written by `save_dataset` or the
    ingest CLI); otherwise derives a fresh scene split from the seed.
    """
    root = Path(root)
    instances = []
    for scene_dir in scan_scene_dirs(root):
        instances.extend(load_scene(scene_dir, points_per_instance, rng_seed))
    split_path = root / "split.json"
    if split_path.is_file():
        split = json.loads(split_path.read_text())
    else:
        split = make_split(sorted({r.scene_id for r in instances}), n_val, n_test, rng_seed)
    return Dataset(instances=instances, split=split)


def save_dataset(dataset, root):
    """Write a loaded dataset back as scene manifests plus split.json.

    Clouds are stored centered with their centroid recorded in the
    manifest, so a reload reproduces the records bit-exactly.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_scene = {}
    for rec in dataset.instances:
        by_scene.setdefault(rec.scene_id, []).append(rec)
    for scene_id, records in sorted(by_scene.items()):
        scene_dir = root / scene_id
        (scene_dir / "points").mkdir(parents=True, exist_ok=True)
        entries = []
        for rec in records:
            rel = f"points/{rec.instance_id}.p2vc"
            write_points_file(scene_dir / rel, rec.cloud)
            entry = {
                "instance_id": rec.instance_id,
                "points_file": rel,
                "centroid": [float(x) for x in rec.centroid],
            }
            if rec.label is not None:
                entry["label"] = rec.label
            entries.append(entry)
        manifest = {"scene_id": scene_id, "instances": entries}
        (scene_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    (root / "split.json").write_text(json.dumps(dataset.split, sort_keys=True, indent=2) + "\n")
