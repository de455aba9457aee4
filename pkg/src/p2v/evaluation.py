"""Latent-space evaluation: clustering, distance tables, reconstruction
quality, PCA artifacts, interpolation, and nearest-neighbor queries.

Everything operates on eval-mode embeddings; labels enter only here,
never on the training path.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

from . import geometry
from .errors import InvalidInputError
from .model import embed_cloud


@dataclass
class ClusterReport:
    k: int
    assignments: list
    ari: float


@dataclass
class DistanceMatrixReport:
    classes: list
    matrix: np.ndarray  # averaged cosine distances, class x class
    intra_mean: float
    inter_mean: float


@dataclass
class PCAReport:
    projected: np.ndarray
    explained_variance_ratio: np.ndarray
    effective_dim: int
    components: np.ndarray  # (out_dim, d) rows, zero beyond effective_dim


def kmeans(vectors, k, rng_seed):
    """Lloyd's algorithm with k-means++ seeding; one run, deterministic per seed."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if k < 1 or k > len(vectors):
        raise InvalidInputError(f"k must be in [1, {len(vectors)}], got {k}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=300,
                random_state=rng_seed, algorithm="lloyd").fit(vectors)
    return km.labels_.tolist()


def adjusted_rand_index(labels_a, labels_b):
    if len(labels_a) != len(labels_b):
        raise InvalidInputError(f"label lists differ in length: {len(labels_a)} vs {len(labels_b)}")
    if len(labels_a) < 2:
        raise InvalidInputError("need at least 2 labels")
    return float(adjusted_rand_score(labels_a, labels_b))


def ari_km_report(vectors, labels, rng_seed, restarts=10):
    """Cluster with k = number of distinct labels and score against them.

    Lloyd's algorithm is initialization-sensitive, so the best of
    `restarts` seeded runs by k-means objective is reported.
    """
    if any(lab is None for lab in labels):
        raise InvalidInputError("ari_km_report needs a label for every instance")
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) != len(labels):
        raise InvalidInputError("vectors and labels differ in length")
    k = len(set(labels))
    best = None
    for i in range(restarts):
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=300,
                    random_state=rng_seed + i, algorithm="lloyd").fit(vectors)
        if best is None or km.inertia_ < best.inertia_:
            best = km
    assignments = best.labels_.tolist()
    return ClusterReport(k=k, assignments=assignments,
                         ari=adjusted_rand_index(labels, assignments))


def cosine_distance_matrix(vectors, labels, class_subset=None):
    """Averaged cosine distance (1 - dot) between instances of class pairs.

    Intra-class entries exclude self-pairs and are NaN for singleton
    classes. The grand means pool pairs, not class averages.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) < 2:
        raise InvalidInputError("need at least 2 embeddings")
    known = sorted({lab for lab in labels})
    classes = known if class_subset is None else sorted(class_subset)
    for c in classes:
        if c not in known:
            raise InvalidInputError(f"unknown class {c!r}")
    by_class = {c: vectors[[i for i, lab in enumerate(labels) if lab == c]] for c in classes}

    n = len(classes)
    matrix = np.full((n, n), np.nan)
    intra_pairs, inter_pairs = [], []
    for i, ci in enumerate(classes):
        for j in range(i, n):
            d = 1.0 - by_class[ci] @ by_class[classes[j]].T
            if i == j:
                if len(by_class[ci]) < 2:
                    continue
                vals = d[np.triu_indices(len(d), k=1)]
                intra_pairs.append(vals)
            else:
                vals = d.ravel()
                inter_pairs.append(vals)
            matrix[i, j] = matrix[j, i] = float(vals.mean())
    intra_mean = float(np.concatenate(intra_pairs).mean()) if intra_pairs else float("nan")
    inter_mean = float(np.concatenate(inter_pairs).mean()) if inter_pairs else float("nan")
    return DistanceMatrixReport(classes=classes, matrix=matrix,
                                intra_mean=intra_mean, inter_mean=inter_mean)


def acd(model, instances):
    """Mean chamfer distance between each cloud and its reconstruction.

    fsum keeps the value exactly invariant to instance order.
    """
    values = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for rec in instances:
                e = model.encode(rec.cloud)
                recon = model.decode(e).squeeze(0).numpy().astype(np.float64)
                values.append(geometry.chamfer_distance(rec.cloud, recon))
    finally:
        model.train(was_training)
    if not values:
        raise InvalidInputError("acd needs at least one instance")
    return math.fsum(values) / len(values)


def pca_project(vectors, out_dim):
    """Mean-centered PCA projection via SVD.

    Degenerate directions (rank < out_dim) project to zero and reduce
    `effective_dim` instead of failing. Component signs are fixed so the
    largest-magnitude loading is positive.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n, d = vectors.shape
    if n < out_dim + 1:
        raise InvalidInputError(f"need at least {out_dim + 1} embeddings for {out_dim} components")
    centered = vectors - vectors.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    rank = int((s > tol).sum())
    comps = vt[:out_dim].copy()
    for row in comps:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    comps[min(rank, out_dim):] = 0.0
    var = s**2
    total = var.sum()
    evr = (var[:out_dim] / total) if total > 0 else np.zeros(out_dim)
    evr = np.pad(evr, (0, out_dim - len(evr)))
    evr[min(rank, out_dim):] = 0.0
    return PCAReport(projected=centered @ comps.T, explained_variance_ratio=evr,
                     effective_dim=min(rank, out_dim), components=comps)


def heatmap_data(vectors, angle_bins=36, grid_bins=32):
    """Fig-6-style artifact data: renormalized 2D PCA as an angle histogram
    and a 2D occupancy grid over [-1, 1]^2."""
    proj = pca_project(vectors, 2).projected
    norms = np.linalg.norm(proj, axis=1)
    keep = norms > 1e-12
    unit = proj[keep] / norms[keep, None]
    angles = np.mod(np.arctan2(unit[:, 1], unit[:, 0]), 2.0 * np.pi)
    hist, edges = np.histogram(angles, bins=angle_bins, range=(0.0, 2.0 * np.pi))
    grid, _, _ = np.histogram2d(unit[:, 0], unit[:, 1], bins=grid_bins,
                                range=[[-1.0, 1.0], [-1.0, 1.0]])
    return {
        "angle_counts": hist,
        "angle_edges": edges,
        "grid": grid,
        "dropped": int((~keep).sum()),
    }


def interpolate(model, e_a, e_b, steps):
    """Decode the normalized linear path between two unit embeddings.

    Returns a list of (t, cloud) with cloud None at an undefined
    (antipodal-midpoint) t. Endpoints pass e_a and e_b through untouched,
    so t=0 and t=1 decode bit-identically to direct decodes.
    """
    if steps < 2:
        raise InvalidInputError(f"steps must be >= 2, got {steps}")
    e_a = np.asarray(e_a, dtype=np.float64)
    e_b = np.asarray(e_b, dtype=np.float64)
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(steps):
                t = i / (steps - 1)
                if i == 0:
                    e = e_a
                elif i == steps - 1:
                    e = e_b
                else:
                    v = (1.0 - t) * e_a + t * e_b
                    norm = np.linalg.norm(v)
                    if norm < 1e-8:
                        out.append((t, None))
                        continue
                    e = v / norm
                cloud = model.decode(e).squeeze(0).numpy().astype(np.float64)
                out.append((t, cloud))
    finally:
        model.train(was_training)
    return out


def query_similar(ids, vectors, query_id, top_k):
    """Ranked (id, cosine distance) list, ascending, query excluded."""
    if top_k < 1:
        raise InvalidInputError(f"top_k must be >= 1, got {top_k}")
    ids = list(ids)
    if query_id not in ids:
        raise InvalidInputError(f"unknown id {query_id!r}")
    vectors = np.asarray(vectors, dtype=np.float64)
    q = vectors[ids.index(query_id)]
    ranked = sorted(
        (float(1.0 - vectors[i] @ q), ids[i])
        for i in range(len(ids)) if ids[i] != query_id
    )
    return [(i, d) for d, i in ranked[:top_k]]


def embed_records(model, records):
    """(record, eval-mode embedding) pairs in input order."""
    return [(rec, embed_cloud(model, rec.cloud)) for rec in records]


def save_embeddings(path, embedded):
    """JSONL, one {scene_id, instance_id, label, vector} record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec, vec in embedded:
            fh.write(json.dumps({
                "scene_id": rec.scene_id,
                "instance_id": rec.instance_id,
                "label": rec.label,
                "vector": [float(x) for x in vec],
            }, sort_keys=True) + "\n")


def load_embeddings(path):
    """Returns (rows, vectors): parsed JSONL records and an (n, d) array."""
    rows = []
    vectors = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            rows.append(row)
            vectors.append(row["vector"])
    if not rows:
        raise InvalidInputError(f"no embeddings in {path}")
    return rows, np.asarray(vectors, dtype=np.float64)
