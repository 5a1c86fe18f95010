"""The three network input streams: normalized pose, motion and pivot differences.

All functions are pure.  Shapes use K actors, T frames, N joints and 3 channels
(x, y, p).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

EPS_TORSO = 1e-6


@dataclass(frozen=True, eq=False)
class StreamTensors:
    gs: np.ndarray  # (K, T, N, 3) normalized pose
    gm: np.ndarray  # (K, T, N, 3) motion
    gd: np.ndarray  # (K, T, N, 3) differences to the pivot actor
    pivot_index: int


def torso_length(xy, layout):
    """Neck to mid-hip distance for xy of shape (..., N, 2)."""
    d = xy[..., layout.neck_index, :] - xy[..., layout.mid_hip_index, :]
    return np.sqrt(np.sum(d * d, axis=-1))


def normalize_frames(joints, layout):
    """Center every skeleton at its mid-hip and divide by its torso length.

    ``joints`` has shape (..., N, 3).  Returns (normalized, degenerate) where
    ``degenerate`` marks frames whose torso length was clamped to EPS_TORSO.
    Joints with p == 0 come out as (0, 0, 0).
    """
    joints = np.asarray(joints, dtype=np.float64)
    xy = joints[..., :2]
    torso = torso_length(xy, layout)
    degenerate = torso < EPS_TORSO
    torso = np.where(degenerate, EPS_TORSO, torso)
    centered = xy - xy[..., layout.mid_hip_index:layout.mid_hip_index + 1, :]
    out = np.empty_like(joints)
    out[..., :2] = centered / torso[..., None, None]
    out[..., 2] = joints[..., 2]
    out[..., :2][joints[..., 2] == 0] = 0.0
    return out, degenerate


def normalize_skeleton(frame, layout):
    """Single-frame version of :func:`normalize_frames`; returns (frame, degenerate)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (layout.n_joints, 3):
        raise ValueError(f"frame must be ({layout.n_joints}, 3), got {frame.shape}")
    out, deg = normalize_frames(frame, layout)
    return out, bool(deg)


def compute_motion(seq, valid=True):
    """Temporal difference frame(t+1) - frame(t) over (..., T, N, 3); the last frame is zero."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim < 3 or seq.shape[-3] < 2:
        raise ValueError("motion needs at least 2 frames")
    out = np.zeros_like(seq)
    out[..., :-1, :, :] = seq[..., 1:, :, :] - seq[..., :-1, :, :]
    if not valid:
        out[...] = 0.0
    return out


def actor_centroids(joints, mask):
    """Per-actor mean (x, y) over all frames, ignoring p == 0 joints.  NaN where undefined."""
    conf = (joints[..., 2] > 0) & mask[:, None, None]
    cnt = conf.sum(axis=(1, 2))
    sums = np.einsum("ktn,ktnc->kc", conf.astype(np.float64), joints[..., :2])
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / cnt[:, None]


def select_pivot(clip):
    """Valid actor whose centroid is closest to the mean of all actor centroids."""
    mask = np.asarray(clip.actor_mask, dtype=bool)
    if not mask.any():
        raise ValueError(f"{clip.clip_id}: no valid actors to choose a pivot from")
    cent = actor_centroids(clip.joints, mask)
    usable = mask & np.isfinite(cent).all(axis=1)
    if not usable.any():
        # no confident joint anywhere; fall back to the first valid actor
        return int(np.flatnonzero(mask)[0])
    centre = cent[usable].mean(axis=0)
    dist = np.sqrt(np.sum((cent - centre) ** 2, axis=1))
    dist[~usable] = np.inf
    # distances equal up to rounding count as ties (lowest index wins), so the
    # choice does not flip under translations/scalings that are exact in theory
    tol = 1e-9 * max(float(dist[usable].max()), 1e-300)
    return int(np.flatnonzero(dist <= dist.min() + tol)[0])


def compute_pivot_diffs(clip, pivot, layout):
    """Raw joint differences to the pivot actor, scaled by the pivot's mean torso length.

    The p channel is the product of the two confidences; x, y are zeroed where
    that product is 0 and on the pivot row itself.
    """
    K = clip.n_actors
    if not 0 <= pivot < K or not clip.actor_mask[pivot]:
        raise ValueError(f"{clip.clip_id}: pivot {pivot} is not a valid actor")
    j = clip.joints
    ref = j[pivot]
    scale = float(np.mean(torso_length(ref[..., :2], layout)))
    scale = max(scale, EPS_TORSO)
    out = np.empty_like(j)
    out[..., :2] = (j[..., :2] - ref[None, ..., :2]) / scale
    out[..., 2] = j[..., 2] * ref[None, ..., 2]
    out[..., :2][out[..., 2] == 0] = 0.0
    out[pivot, ..., :2] = 0.0
    out[~clip.actor_mask] = 0.0
    return out


def assemble_streams(clip, layout, use_gd=True):
    mask = np.asarray(clip.actor_mask, dtype=bool)
    gs, _ = normalize_frames(clip.joints, layout)
    gs[~mask] = 0.0
    gm = compute_motion(gs)
    gm[~mask] = 0.0
    pivot = select_pivot(clip)
    if use_gd:
        gd = compute_pivot_diffs(clip, pivot, layout)
    else:
        gd = np.zeros_like(gs)
    return StreamTensors(gs, gm, gd, pivot)


def horizontal_flip(clip, layout, label_flip_map=None):
    """Mirror x, swap left/right joints, and remap labels through ``label_flip_map`` if given."""
    joints = np.array(clip.joints)
    joints[..., 0] = -joints[..., 0]
    joints = joints[:, :, list(layout.lr_swap), :]
    group = clip.group_label
    action = clip.action_labels
    if label_flip_map:
        gmap = label_flip_map.get("group")
        if gmap is not None:
            group = int(gmap[group])
        amap = label_flip_map.get("action")
        if amap is not None and action is not None:
            lut = np.asarray(amap, dtype=np.int64)
            action = np.where(action >= 0, lut[np.maximum(action, 0)], -1)
    return replace(clip, joints=joints, group_label=group, action_labels=action)


def dataset_streams(ds, use_gd=True, flip=False):
    """Stacked streams for a whole dataset: array (n, 3, K, T, N, 3) and pivot indices."""
    n = len(ds.clips)
    out = np.zeros((n, 3, ds.n_actors, ds.n_frames, ds.layout.n_joints, 3))
    pivots = np.zeros(n, dtype=np.int64)
    for i, clip in enumerate(ds.clips):
        if flip:
            clip = horizontal_flip(clip, ds.layout, ds.label_flip_map)
        st = assemble_streams(clip, ds.layout, use_gd)
        out[i, 0], out[i, 1], out[i, 2] = st.gs, st.gm, st.gd
        pivots[i] = st.pivot_index
    return out, pivots


# ---------------------------------------------------------------------------
# flat binary tensor records: 4 little-endian int32 shape fields, then
# row-major little-endian float32 data.  Tensors of rank < 4 are padded with
# trailing 1s in the header.

def write_tensor_records(fh, tensors):
    for t in tensors:
        t = np.asarray(t)
        if t.ndim > 4:
            raise ValueError(f"tensor rank {t.ndim} does not fit a 4-field header")
        shape = tuple(t.shape) + (1,) * (4 - t.ndim)
        fh.write(struct.pack("<4i", *shape))
        fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_tensor_records(fh):
    out = []
    while True:
        head = fh.read(16)
        if not head:
            return out
        if len(head) != 16:
            raise ValueError("truncated tensor header")
        shape = struct.unpack("<4i", head)
        if any(s < 0 for s in shape):
            raise ValueError(f"negative dimension in tensor header {shape}")
        count = int(np.prod(shape))
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError("truncated tensor data")
        out.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))


def dump_streams(path, streams):
    """Write gs, gm, gd as three consecutive tensor records."""
    with open(path, "wb") as fh:
        write_tensor_records(fh, [streams.gs, streams.gm, streams.gd])
