"""Pseudo action labels: per-actor features -> PCA whitening -> L2 -> k-means.

Feature text file::

    n_samples dim
    clip_id actor_index v1 ... v_dim     (one line per masked-in actor)

The binary alternative is a single tensor record as written by
``streams.write_tensor_records`` with shape (n_samples, dim, 1, 1); its rows
follow dataset order (clips in order, actors by ascending index, padding
skipped), so reading it needs the dataset.

Assignment file: one ``clip_id actor_index cluster_id`` line per actor.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .streams import compute_motion, normalize_frames, read_tensor_records

log = logging.getLogger(__name__)


class PseudoLabelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    rows: np.ndarray  # (n_samples, dim)
    ids: tuple  # (clip_id, actor_index) per row

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise PseudoLabelError(f"feature rows must be 2-D, got shape {rows.shape}")
        ids = tuple((str(c), int(a)) for c, a in self.ids)
        if len(ids) != rows.shape[0]:
            raise PseudoLabelError(f"{len(ids)} ids for {rows.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise PseudoLabelError("duplicate (clip_id, actor_index) ids")
        if not np.all(np.isfinite(rows)):
            raise PseudoLabelError("non-finite feature values")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "ids", ids)

    @property
    def dim(self):
        return self.rows.shape[1]

    def __len__(self):
        return self.rows.shape[0]


@dataclass(frozen=True)
class PseudoConfig:
    pca_dim: int = 256
    k: int = 20
    max_iters: int = 100
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.pca_dim < 1 or self.k < 1 or self.max_iters < 1 or self.restarts < 1:
            raise ValueError("pca_dim, k, max_iters and restarts must all be >= 1")


def actor_ids(ds):
    return [(c.clip_id, int(k)) for c in ds.clips for k in np.flatnonzero(c.actor_mask)]


def stand_in_features(ds):
    """Hand-crafted per-actor descriptor of dim 3 * N * 3.

    Concatenates the temporal mean of the normalized pose, its temporal
    standard deviation, and the mean absolute frame-to-frame motion, each over
    all N joints and the (x, y, p) channels.
    """
    rows, ids = [], []
    for clip in ds.clips:
        gs, _ = normalize_frames(clip.joints, ds.layout)
        motion = compute_motion(gs)[:, :-1]
        for k in np.flatnonzero(clip.actor_mask):
            rows.append(np.concatenate([gs[k].mean(axis=0).ravel(), gs[k].std(axis=0).ravel(),
                                        np.abs(motion[k]).mean(axis=0).ravel()]))
            ids.append((clip.clip_id, int(k)))
    dim = 9 * ds.layout.n_joints
    return FeatureMatrix(np.array(rows).reshape(len(rows), dim), ids)


@dataclass(frozen=True, eq=False)
class Whitening:
    mean: np.ndarray
    components: np.ndarray  # (d_out, dim) principal directions
    scale: np.ndarray  # (d_out,) standard deviation along each direction

    def transform(self, rows):
        return (np.asarray(rows) - self.mean) @ self.components.T / self.scale


def fit_whitening(rows, pca_dim, rel_tol=1e-10):
    """PCA via thin SVD of the centered data; keeps directions with variance >= rel_tol * leading."""
    n, dim = rows.shape
    if n <= pca_dim:
        raise PseudoLabelError(f"PCA needs more samples ({n}) than output dimensions ({pca_dim})")
    if pca_dim > dim:
        raise PseudoLabelError(f"pca_dim {pca_dim} exceeds feature dim {dim}")
    mean = rows.mean(axis=0)
    _, s, vt = np.linalg.svd(rows - mean, full_matrices=False)
    var = s ** 2 / (n - 1)
    keep = min(pca_dim, int(np.sum(var >= rel_tol * var[0])) if var[0] > 0 else 0)
    if keep < pca_dim:
        warnings.warn(f"only {keep} of {pca_dim} principal components have non-negligible "
                      f"variance; output dimension reduced to {keep}", RuntimeWarning, stacklevel=3)
    return Whitening(mean, vt[:keep], np.sqrt(var[:keep]))


def pca_whiten(feats, pca_dim):
    """Project onto the top principal components and scale each to unit variance.

    The sample covariance (ddof=1) of the output is the identity on the input
    sample.  Near-zero-variance directions are dropped with a RuntimeWarning.
    """
    w = fit_whitening(feats.rows, pca_dim)
    return FeatureMatrix(w.transform(feats.rows), feats.ids)


def l2_normalize(feats):
    """Scale rows to unit norm; returns (FeatureMatrix, zero_row_flags)."""
    norms = np.linalg.norm(feats.rows, axis=1)
    zero = norms == 0
    rows = feats.rows / np.where(zero, 1.0, norms)[:, None]
    return FeatureMatrix(rows, feats.ids), zero


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    trace: list  # inertia after each assignment step of the kept run
    converged: bool


def _sq_dists(x, c):
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d), rng.uniform(0, total), side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d = np.minimum(d, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return np.array(centers)


def _lloyd(x, centroids, max_iters):
    k = len(centroids)
    prev = None
    trace = []
    for _ in range(max_iters):
        d = _sq_dists(x, centroids)
        assign = np.argmin(d, axis=1)
        best = d[np.arange(len(x)), assign]
        trace.append(float(best.sum()))
        if prev is not None and np.array_equal(assign, prev):
            return assign, centroids, trace, True
        prev = assign
        counts = np.bincount(assign, minlength=k)
        new = np.zeros_like(centroids)
        np.add.at(new, assign, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        # empty clusters restart at the points currently farthest from their centroid
        taken = set()
        for j in np.flatnonzero(~nonempty):
            order = np.argsort(-best, kind="stable")
            for i in order:
                if int(i) not in taken:
                    taken.add(int(i))
                    new[j] = x[i]
                    break
        centroids = new
    d = _sq_dists(x, centroids)
    assign = np.argmin(d, axis=1)
    trace.append(float(d[np.arange(len(x)), assign].sum()))
    return assign, centroids, trace, bool(prev is not None and np.array_equal(assign, prev))


def kmeans(rows, k, max_iters=100, restarts=5, seed=0):
    """k-means++ seeding, Lloyd iterations, best of ``restarts`` runs by inertia."""
    x = np.asarray(rows.rows if isinstance(rows, FeatureMatrix) else rows, dtype=np.float64)
    if k < 1:
        raise PseudoLabelError("k must be >= 1")
    if len(x) < k:
        raise PseudoLabelError(f"k-means needs at least k={k} samples, got {len(x)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        init = _kmeanspp(x, k, rng)
        assign, cent, trace, conv = _lloyd(x, init, max_iters)
        res = KMeansResult(assign, cent, trace[-1], trace, conv)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def cluster_features(feats, cfg):
    """PCA-whiten, L2-normalize and cluster; pca_dim is capped at the feature dimension."""
    dim = min(cfg.pca_dim, feats.dim)
    if dim < cfg.pca_dim:
        log.warning("pca_dim %d exceeds feature dim %d; using %d", cfg.pca_dim, feats.dim, dim)
    white = pca_whiten(feats, dim)
    normed, zero = l2_normalize(white)
    if zero.any():
        log.warning("%d feature rows are zero after whitening", int(zero.sum()))
    return kmeans(normed, cfg.k, cfg.max_iters, cfg.restarts, cfg.seed)


def assign_pseudolabels(ds, ids, assignments, k):
    """Copy of ``ds`` whose action labels are cluster ids in [0, k).

    The original action labels move to ``true_action_labels`` for evaluation.
    """
    table = {}
    for key, a in zip(ids, np.asarray(assignments).tolist()):
        key = (str(key[0]), int(key[1]))
        if key in table:
            raise PseudoLabelError(f"duplicate assignment for clip {key[0]!r} actor {key[1]}")
        if not 0 <= a < k:
            raise PseudoLabelError(f"cluster id {a} outside [0, {k})")
        table[key] = int(a)
    expected = set(actor_ids(ds))
    extra = sorted(set(table) - expected)
    if extra:
        raise PseudoLabelError(f"assignment for unknown or padding actor: clip {extra[0][0]!r} actor {extra[0][1]}")
    missing = [i for i in actor_ids(ds) if i not in table]
    if missing:
        shown = ", ".join(f"{c}:{a}" for c, a in missing[:10])
        raise PseudoLabelError(f"missing assignment for {len(missing)} actor(s): {shown}")
    clips = []
    for c in ds.clips:
        labels = np.full(c.n_actors, -1, dtype=np.int64)
        for a in np.flatnonzero(c.actor_mask):
            labels[a] = table[(c.clip_id, int(a))]
        true = c.true_action_labels if ds.pseudo_labeled else c.action_labels
        clips.append(replace(c, action_labels=labels, true_action_labels=true))
    return replace(ds, clips=tuple(clips), action_classes=tuple(f"cluster{i}" for i in range(k)),
                   pseudo_labeled=True)


def pseudo_label_dataset(ds, cfg, feats=None):
    """Full pipeline on ``ds`` (stand-in descriptors unless ``feats`` is given)."""
    feats = stand_in_features(ds) if feats is None else feats
    res = cluster_features(feats, cfg)
    return assign_pseudolabels(ds, feats.ids, res.assignments, cfg.k), res


# ---------------------------------------------------------------------------
# files

def write_feature_file(path, feats):
    with open(path, "w") as fh:
        fh.write(f"{len(feats)} {feats.dim}\n")
        for (cid, a), row in zip(feats.ids, feats.rows):
            fh.write(f"{cid} {a} " + " ".join(repr(float(v)) for v in row) + "\n")


def _looks_like_text(head):
    try:
        first = head.decode("ascii").split("\n")[0]
    except UnicodeDecodeError:
        return False
    parts = first.split()
    return len(parts) >= 2 and all(p.isdigit() for p in parts[:2])


def read_feature_file(path, ds=None):
    with open(path, "rb") as fh:
        data = fh.read()
    if _looks_like_text(data[:64]):
        lines = data.decode("utf-8").splitlines()
        try:
            n, dim = (int(v) for v in lines[0].split())
        except ValueError:
            raise PseudoLabelError(f"{path}: header must be 'n_samples dim'") from None
        body = [ln for ln in lines[1:] if ln.strip()]
        if len(body) != n:
            raise PseudoLabelError(f"{path}: header says {n} rows, found {len(body)}")
        ids, rows = [], np.zeros((n, dim))
        for i, ln in enumerate(body):
            parts = ln.split()
            if len(parts) != dim + 2:
                raise PseudoLabelError(f"{path}: line {i + 2} has {len(parts) - 2} values, expected {dim}")
            try:
                ids.append((parts[0], int(parts[1])))
                rows[i] = [float(v) for v in parts[2:]]
            except ValueError:
                raise PseudoLabelError(f"{path}: line {i + 2} is not numeric") from None
        return FeatureMatrix(rows, ids)
    if ds is None:
        raise PseudoLabelError(f"{path}: binary feature files need the dataset to resolve row ids")
    import io
    recs = read_tensor_records(io.BytesIO(data))
    if len(recs) != 1:
        raise PseudoLabelError(f"{path}: expected one tensor record, found {len(recs)}")
    arr = recs[0]
    rows = arr.reshape(arr.shape[0], -1).astype(np.float64)
    ids = actor_ids(ds)
    if len(ids) != len(rows):
        raise PseudoLabelError(f"{path}: {len(rows)} rows but the dataset has {len(ids)} real actors")
    return FeatureMatrix(rows, ids)


def write_assignments(path, ids, assignments):
    with open(path, "w") as fh:
        for (cid, a), c in zip(ids, np.asarray(assignments).tolist()):
            fh.write(f"{cid} {a} {c}\n")


def read_assignments(path):
    ids, assign = [], []
    with open(path) as fh:
        for i, ln in enumerate(fh, 1):
            if not ln.strip():
                continue
            parts = ln.split()
            if len(parts) != 3:
                raise PseudoLabelError(f"{path}: line {i} must be 'clip_id actor_index cluster_id'")
            try:
                ids.append((parts[0], int(parts[1])))
                assign.append(int(parts[2]))
            except ValueError:
                raise PseudoLabelError(f"{path}: line {i} has non-integer fields") from None
    return ids, np.array(assign, dtype=np.int64)
