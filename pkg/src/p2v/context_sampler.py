"""Training quadruples and the precomputed geometric-similarity cache.

The sampler needs two candidate lists per training instance: the
instances nearest in scene space (close context) and the instances with
the smallest rotation-optimized chamfer distance over the whole training
set (similar context). Both are precomputed once, because the pairwise
rotation search dominates startup, and persisted keyed by a content hash
of the training set and parameters.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .errors import DatasetError, InvalidInputError

log = logging.getLogger(__name__)

CACHE_FORMAT = "p2v-simcache"
CACHE_VERSION = 1

INVERSE_WEIGHT_EPS = 1e-6


@dataclass
class ContextQuadruple:
    anchor: int
    close: int
    similar: int
    negative: int

    def indices(self):
        return (self.anchor, self.close, self.similar, self.negative)


@dataclass
class SimilarityCache:
    """Per-anchor candidate lists, each a list of (index, distance) ascending."""

    close: list
    similar: list
    params: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __len__(self):
        return len(self.close)


def dataset_fingerprint(train_instances, params):
    """Content hash binding instance order, geometry, and cache parameters.

    Labels are deliberately excluded: they must not influence anything on
    the training path.
    """
    h = hashlib.sha256()
    h.update(json.dumps(params, sort_keys=True).encode())
    for i, rec in enumerate(train_instances):
        h.update(f"|{i}:{rec.scene_id}:{rec.instance_id}".encode())
        h.update(np.ascontiguousarray(rec.centroid, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(rec.cloud, dtype="<f4").tobytes())
    return h.hexdigest()


_WORKER_STATE = {}


def _init_worker(clouds, grid_steps, refine_tol):
    _WORKER_STATE["clouds"] = clouds
    _WORKER_STATE["grid_steps"] = grid_steps
    _WORKER_STATE["refine_tol"] = refine_tol


def _similar_rows(row_indices):
    clouds = _WORKER_STATE["clouds"]
    out = []
    for i in row_indices:
        row = np.empty(len(clouds))
        for j in range(len(clouds)):
            if j == i:
                row[j] = np.inf
                continue
            d, _ = geometry.rotation_optimized_chamfer(
                clouds[i], clouds[j],
                grid_steps=_WORKER_STATE["grid_steps"],
                refine_tol=_WORKER_STATE["refine_tol"],
            )
            row[j] = d
        out.append((i, row))
    return out


def _truncated_list(distances, skip, k):
    order = sorted((float(d), j) for j, d in enumerate(distances) if j != skip and np.isfinite(d))
    return [(j, d) for d, j in order[:k]]


def build_cache(train_instances, k_close=10, k_similar=10, grid_steps=36,
                refine_tol=1e-3, workers=None):
    """Compute close and similar candidate lists for every training instance.

    Close candidates are same-scene neighbors by centroid distance; similar
    candidates come from the full pairwise rotation-optimized chamfer
    matrix, which is the expensive part (embarrassingly parallel over
    rows, enable with workers > 1).
    """
    n = len(train_instances)
    if n < 2:
        raise InvalidInputError("need at least 2 training instances to build a cache")
    params = {
        "k_close": int(k_close),
        "k_similar": int(k_similar),
        "grid_steps": int(grid_steps),
        "refine_tol": None if refine_tol is None else float(refine_tol),
    }

    centroids = np.stack([r.centroid for r in train_instances]).astype(np.float64)
    scene_of = [r.scene_id for r in train_instances]
    close_lists = []
    for i in range(n):
        dist = np.linalg.norm(centroids - centroids[i], axis=1)
        same_scene = [j for j in range(n) if scene_of[j] == scene_of[i] and j != i]
        order = sorted((float(dist[j]), j) for j in same_scene)
        close_lists.append([(j, d) for d, j in order[:k_close]])

    clouds = [np.ascontiguousarray(r.cloud, dtype=np.float64) for r in train_instances]
    rows = [None] * n
    if workers and workers > 1:
        chunks = [list(range(i, n, workers)) for i in range(workers)]
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker,
            initargs=(clouds, grid_steps, refine_tol),
        ) as pool:
            for result in pool.map(_similar_rows, chunks):
                for i, row in result:
                    rows[i] = row
    else:
        _init_worker(clouds, grid_steps, refine_tol)
        for i, row in _similar_rows(list(range(n))):
            rows[i] = row
    similar_lists = [_truncated_list(rows[i], i, k_similar) for i in range(n)]

    return SimilarityCache(
        close=close_lists,
        similar=similar_lists,
        params=params,
        fingerprint=dataset_fingerprint(train_instances, params),
    )


def save_cache(cache, path):
    blob = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "fingerprint": cache.fingerprint,
        "params": cache.params,
        "close": [[[int(j), float(d)] for j, d in lst] for lst in cache.close],
        "similar": [[[int(j), float(d)] for j, d in lst] for lst in cache.similar],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(blob, sort_keys=True) + "\n")


def load_cache(path):
    try:
        blob = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read similarity cache {path}: {exc}") from exc
    if blob.get("format") != CACHE_FORMAT or blob.get("version") != CACHE_VERSION:
        raise DatasetError(f"{path}: not a version-{CACHE_VERSION} {CACHE_FORMAT} file")
    return SimilarityCache(
        close=[[(int(j), float(d)) for j, d in lst] for lst in blob["close"]],
        similar=[[(int(j), float(d)) for j, d in lst] for lst in blob["similar"]],
        params=blob["params"],
        fingerprint=blob["fingerprint"],
    )


def ensure_cache(train_instances, cache_dir, k_close=10, k_similar=10, grid_steps=36,
                 refine_tol=1e-3, workers=None):
    """Load a matching cache from `cache_dir` or build and persist one."""
    params = {
        "k_close": int(k_close),
        "k_similar": int(k_similar),
        "grid_steps": int(grid_steps),
        "refine_tol": None if refine_tol is None else float(refine_tol),
    }
    fingerprint = dataset_fingerprint(train_instances, params)
    path = Path(cache_dir) / f"simcache_{fingerprint[:16]}.json"
    if path.is_file():
        try:
            cache = load_cache(path)
        except DatasetError as exc:
            log.warning("rebuilding similarity cache: %s", exc)
        else:
            if cache.fingerprint == fingerprint:
                return cache
            log.warning("similarity cache %s is stale, rebuilding", path)
    cache = build_cache(train_instances, k_close=k_close, k_similar=k_similar,
                        grid_steps=grid_steps, refine_tol=refine_tol, workers=workers)
    save_cache(cache, path)
    return cache


def inverse_transform_sample(candidates, rng):
    """Pick a candidate index with probability inversely weighted by distance.

    One uniform draw inverted through the CDF of w_i = 1/(d_i + eps).
    """
    if not candidates:
        raise InvalidInputError("cannot sample from an empty candidate list")
    dist = np.array([d for _, d in candidates], dtype=np.float64)
    if (dist < 0).any():
        raise InvalidInputError("candidate distances must be nonnegative")
    weights = 1.0 / (dist + INVERSE_WEIGHT_EPS)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    u = rng.uniform()
    pick = int(np.searchsorted(cdf, u, side="right"))
    pick = min(pick, len(candidates) - 1)
    return candidates[pick][0]


def sample_quadruple(cache, rng, max_retries=100):
    """Draw one (anchor, close, similar, negative) index quadruple.

    Anchor is uniform; similar is drawn first so close can exclude it;
    negative is uniform over everything else. All four are distinct.
    """
    n = len(cache)
    if n < 4:
        raise InvalidInputError("need at least 4 training instances to sample quadruples")
    for _ in range(max_retries):
        anchor = int(rng.integers(n))
        if not cache.close[anchor] or not cache.similar[anchor]:
            continue
        similar = inverse_transform_sample(cache.similar[anchor], rng)
        close_candidates = [(j, d) for j, d in cache.close[anchor] if j != similar]
        if not close_candidates:
            continue
        close = inverse_transform_sample(close_candidates, rng)
        # uniform over the complement of the three taken indices
        taken = sorted({anchor, close, similar})
        j = int(rng.integers(n - 3))
        for t in taken:
            if j >= t:
                j += 1
        return ContextQuadruple(anchor=anchor, close=close, similar=similar, negative=j)
    raise InvalidInputError(f"no valid anchor found after {max_retries} retries")
