"""Synthetic scene generator for tests and the bundled end-to-end fixture.

Scenes contain a handful of primitive shapes (box, sphere, cylinder,
plane) arranged in context groups: classes of the same group are placed
within `group_radius` of a shared group center, and group centers are
kept at least four radii apart. Within a group, instances of the same
class additionally huddle around a per-class sub-center (chairs end up
next to chairs, not scattered across the seating area), controlled by
`class_spread`. Nearby objects therefore tend to share a class by
construction, which is exactly the structure the context loss is meant
to exploit.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, ingest
from .errors import InvalidInputError

# group centers are rejection-sampled at least this many radii apart so
# that nearest neighbors are same-group members
GROUP_SEPARATION = 4.0


@dataclass
class SyntheticSpec:
    classes: dict = field(default_factory=dict)  # name -> {"kind": ..., "size": (lo, hi)}
    groups: list = field(default_factory=list)  # list of lists of class names
    n_scenes: int = 12
    instances_per_scene: int = 10
    group_radius: float = 1.0
    class_spread: float = 0.4  # fraction of the group disc left to within-class scatter; 1.0 disables sub-clustering
    scene_extent: float = 8.0
    n_points: int = 384  # stored per instance when storage == "points"
    jitter: float = 0.0  # gaussian noise added to sampled points
    storage: str = "points"  # "points" | "mesh"

    def validate(self):
        if not self.classes or not self.groups:
            raise InvalidInputError("synthetic spec needs classes and groups")
        known_kinds = {"box", "sphere", "cylinder", "plane"}
        for name, cfg in self.classes.items():
            if cfg.get("kind") not in known_kinds:
                raise InvalidInputError(f"class {name!r}: kind must be one of {sorted(known_kinds)}")
            lo, hi = cfg.get("size", (0, 0))
            if not (0 < lo <= hi):
                raise InvalidInputError(f"class {name!r}: bad size range ({lo}, {hi})")
        for group in self.groups:
            if not group:
                raise InvalidInputError("empty context group")
            for name in group:
                if name not in self.classes:
                    raise InvalidInputError(f"group references unknown class {name!r}")
        if self.n_scenes < 1 or self.instances_per_scene < 1:
            raise InvalidInputError("need at least one scene and one instance per scene")
        if not (0.0 < self.class_spread <= 1.0):
            raise InvalidInputError("class_spread must be in (0, 1]")
        if self.storage not in ("points", "mesh"):
            raise InvalidInputError(f"storage must be points or mesh, got {self.storage!r}")
        if self.n_points < 4:
            raise InvalidInputError("n_points must be at least 4")

    @classmethod
    def from_dict(cls, data):
        spec = default_synthetic_spec()
        for key, value in data.items():
            if not hasattr(spec, key):
                raise InvalidInputError(f"unknown synthetic spec field {key!r}")
            setattr(spec, key, value)
        spec.classes = {k: dict(v) for k, v in spec.classes.items()}
        spec.groups = [list(g) for g in spec.groups]
        spec.validate()
        return spec


def default_synthetic_spec():
    """Four classes in two context groups: {box, sphere} and {cylinder, plane}."""
    return SyntheticSpec(
        classes={
            "box": {"kind": "box", "size": (0.25, 0.45)},
            "sphere": {"kind": "sphere", "size": (0.25, 0.45)},
            "cylinder": {"kind": "cylinder", "size": (0.25, 0.45)},
            "plane": {"kind": "plane", "size": (0.3, 0.5)},
        },
        groups=[["box", "sphere"], ["cylinder", "plane"]],
    )


def _box_mesh(half_extents):
    hx, hy, hz = half_extents
    v = np.array(
        [
            [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
            [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
        ]
    )
    quads = [
        (0, 3, 2, 1), (4, 5, 6, 7),  # bottom, top
        (0, 1, 5, 4), (2, 3, 7, 6),  # front, back
        (1, 2, 6, 5), (3, 0, 4, 7),  # right, left
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    return v, np.array(faces)


def _plane_mesh(side):
    h = side / 2.0
    v = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    return v, np.array([[0, 1, 2], [0, 2, 3]])


def _cylinder_mesh(radius, height, n_seg=16):
    angles = 2.0 * np.pi * np.arange(n_seg) / n_seg
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    z = height / 2.0
    bottom = np.concatenate([ring, np.full((n_seg, 1), -z)], axis=1)
    top = np.concatenate([ring, np.full((n_seg, 1), z)], axis=1)
    centers = np.array([[0.0, 0.0, -z], [0.0, 0.0, z]])
    v = np.concatenate([bottom, top, centers], axis=0)
    cb, ct = 2 * n_seg, 2 * n_seg + 1
    faces = []
    for i in range(n_seg):
        j = (i + 1) % n_seg
        faces.append([i, j, n_seg + j])  # side quad split
        faces.append([i, n_seg + j, n_seg + i])
        faces.append([cb, j, i])  # bottom cap
        faces.append([ct, n_seg + i, n_seg + j])  # top cap
    return v, np.array(faces)


def _sphere_mesh(radius, n_seg=12, n_rings=8):
    verts = [np.array([0.0, 0.0, radius])]
    for r in range(1, n_rings):
        phi = np.pi * r / n_rings
        for s in range(n_seg):
            theta = 2.0 * np.pi * s / n_seg
            verts.append(
                radius
                * np.array([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)])
            )
    verts.append(np.array([0.0, 0.0, -radius]))
    v = np.stack(verts)
    south = len(verts) - 1
    ring0 = lambda r: 1 + (r - 1) * n_seg
    faces = []
    for s in range(n_seg):
        faces.append([0, ring0(1) + s, ring0(1) + (s + 1) % n_seg])
        faces.append([south, ring0(n_rings - 1) + (s + 1) % n_seg, ring0(n_rings - 1) + s])
    for r in range(1, n_rings - 1):
        for s in range(n_seg):
            a = ring0(r) + s
            b = ring0(r) + (s + 1) % n_seg
            c = ring0(r + 1) + (s + 1) % n_seg
            d = ring0(r + 1) + s
            faces.append([a, b, c])
            faces.append([a, c, d])
    return v, np.array(faces)


def _build_shape(kind, size, rng):
    if kind == "box":
        aspect = rng.uniform(0.7, 1.3, size=3)
        return _box_mesh(size / 2.0 * aspect)
    if kind == "sphere":
        return _sphere_mesh(size / 2.0)
    if kind == "cylinder":
        return _cylinder_mesh(0.3 * size, size)
    if kind == "plane":
        return _plane_mesh(size)
    raise InvalidInputError(f"unknown shape kind {kind!r}")


def _place_group_centers(n_groups, extent, radius, rng):
    """Rejection-sample centers at least GROUP_SEPARATION radii apart."""
    lo, hi = radius, extent - radius
    if hi <= lo:
        raise InvalidInputError("scene_extent too small for group_radius")
    min_dist = GROUP_SEPARATION * radius
    for _ in range(10000):
        centers = rng.uniform(lo, hi, size=(n_groups, 2))
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diffs**2).sum(axis=2))
        if n_groups == 1 or dist[np.triu_indices(n_groups, k=1)].min() >= min_dist:
            return centers
    raise InvalidInputError("could not separate group centers; increase scene_extent")


def generate_synthetic_scenes(spec, out_dir, rng_seed):
    """Write `spec.n_scenes` scenes under `out_dir`; returns the scene directories.

    Byte-identical output for identical spec and seed.
    """
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_dirs = []
    for scene_idx in range(spec.n_scenes):
        scene_id = f"scene_{scene_idx:03d}"
        scene_dir = out_dir / scene_id
        scene_dir.mkdir(exist_ok=True)
        centers = _place_group_centers(len(spec.groups), spec.scene_extent, spec.group_radius, rng)
        # per-class sub-centers inside each group disc; the sub-center offset
        # plus the per-instance scatter never exceeds 0.95 * group_radius
        reach = 0.95 * spec.group_radius
        sub_centers = {}
        for g_idx, group in enumerate(spec.groups):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            for c_idx, name in enumerate(group):
                a = phase + 2.0 * np.pi * c_idx / len(group)
                off = reach * (1.0 - spec.class_spread)
                sub_centers[(g_idx, name)] = centers[g_idx] + off * np.array([np.cos(a), np.sin(a)])

        entries = []
        all_verts, all_faces, all_groups = [], [], []
        vert_base = 0
        for inst_idx in range(spec.instances_per_scene):
            group_idx = inst_idx % len(spec.groups)
            group = spec.groups[group_idx]
            label = group[rng.integers(len(group))]
            cfg = spec.classes[label]
            size = rng.uniform(*cfg["size"])
            verts, faces = _build_shape(cfg["kind"], size, rng)

            theta = rng.uniform(0.0, 2.0 * np.pi)
            # scatter around the class sub-center, slight height variation
            sub = sub_centers[(group_idx, label)]
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = reach * spec.class_spread * np.sqrt(rng.uniform())
            dz = rng.uniform(0.0, 0.1 * spec.group_radius)
            position = np.array([sub[0] + rad * np.cos(ang), sub[1] + rad * np.sin(ang), dz])
            verts = geometry.rotate_z(verts, theta) + position

            instance_id = f"{label}_{inst_idx:03d}"
            entry = {"instance_id": instance_id, "label": label}
            if spec.storage == "points":
                mesh = geometry.TriangleMesh(verts, faces)
                seed = ingest.instance_seed(rng_seed, scene_id, instance_id)
                pts = geometry.sample_surface(mesh, 0, spec.n_points, seed)
                if spec.jitter > 0:
                    pts = pts + spec.jitter * np.random.default_rng(seed + 1).standard_normal(pts.shape)
                rel = f"points/{instance_id}.p2vc"
                (scene_dir / "points").mkdir(exist_ok=True)
                ingest.write_points_file(scene_dir / rel, pts)
                entry["points_file"] = rel
            else:
                all_verts.append(verts)
                all_faces.append(faces + vert_base)
                all_groups.append(np.full(len(faces), inst_idx))
                vert_base += len(verts)
                entry["mesh_ref"] = {"file": "mesh.ply", "face_group": inst_idx}
            entries.append(entry)

        if spec.storage == "mesh":
            mesh = geometry.TriangleMesh(
                np.concatenate(all_verts),
                np.concatenate(all_faces),
                np.concatenate(all_groups),
            )
            ingest.write_mesh_file(scene_dir / "mesh.ply", mesh)
        manifest = {"scene_id": scene_id, "instances": entries}
        (scene_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        scene_dirs.append(scene_dir)
    return scene_dirs
