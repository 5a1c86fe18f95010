"""Multi-actor skeleton clips: in-memory types, JSON clip files, synthetic data.

A clip is stored as one dense array of shape (K, T, N, 3) holding (x, y, p) per
joint, per frame, per actor.  Clips with fewer than K real actors are padded with
all-zero actors whose mask bit is False.

On-disk layout (one directory per dataset)::

    manifest.json        {"format", "layout", "group_classes", "action_classes",
                          "label_flip_map", "n_actors", "n_frames", "clips"}
    clips/<clip_id>.json {"clip_id", "group_label",
                          "actors": [{"action_label": int|null,
                                      "frames": [[[x, y, p] * N] * T]}]}

Only real actors are written; padding is restored by the loader.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

FORMAT_TAG = "skelgar-clips/1"

# OpenPose BODY_25 ordering
BODY25_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow",
    "l_wrist", "mid_hip", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee",
    "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear", "l_big_toe", "l_small_toe",
    "l_heel", "r_big_toe", "r_small_toe", "r_heel",
)
_BODY25_PAIRS = ((2, 5), (3, 6), (4, 7), (9, 12), (10, 13), (11, 14), (15, 16),
                 (17, 18), (19, 22), (20, 23), (21, 24))


def _swap_from_pairs(n, pairs):
    perm = list(range(n))
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return tuple(perm)


class DatasetError(ValueError):
    """Raised for unreadable, malformed or inconsistent clip data."""


@dataclass(frozen=True)
class SkeletonLayout:
    n_joints: int = 25
    mid_hip_index: int = 8
    neck_index: int = 1
    lr_swap: tuple = _swap_from_pairs(25, _BODY25_PAIRS)

    def __post_init__(self):
        object.__setattr__(self, "lr_swap", tuple(int(i) for i in self.lr_swap))
        n = self.n_joints
        if len(self.lr_swap) != n:
            raise DatasetError(f"lr_swap has {len(self.lr_swap)} entries, expected {n}")
        for name in ("mid_hip_index", "neck_index"):
            if not 0 <= getattr(self, name) < n:
                raise DatasetError(f"{name}={getattr(self, name)} out of range for {n} joints")
        if sorted(self.lr_swap) != list(range(n)):
            raise DatasetError("lr_swap is not a permutation")
        if any(self.lr_swap[self.lr_swap[i]] != i for i in range(n)):
            raise DatasetError("lr_swap is not an involution")

    @classmethod
    def body25(cls):
        return cls()

    @classmethod
    def generic(cls, n_joints):
        """Mid-hip 0, neck 1, then (right, left) joint pairs; a trailing odd joint is central."""
        if n_joints < 3:
            raise DatasetError("a generic layout needs at least 3 joints")
        pairs = [(j, j + 1) for j in range(2, n_joints - 1, 2)]
        return cls(n_joints, 0, 1, _swap_from_pairs(n_joints, pairs))

    def to_dict(self):
        return {"n_joints": self.n_joints, "mid_hip_index": self.mid_hip_index,
                "neck_index": self.neck_index, "lr_swap": list(self.lr_swap)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_joints"]), int(d["mid_hip_index"]), int(d["neck_index"]),
                   tuple(d["lr_swap"]))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ClipRecord:
    """One labeled group sequence.

    ``joints`` is (K, T, N, 3).  ``action_labels`` uses -1 for "no label" and is
    always -1 on padding actors.  ``true_action_labels`` keeps the original labels
    when pseudo labels have replaced ``action_labels``; it is never used for training.
    """

    clip_id: str
    joints: np.ndarray
    group_label: int
    actor_mask: np.ndarray
    action_labels: np.ndarray | None = None
    true_action_labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "joints", _frozen(self.joints, np.float64))
        object.__setattr__(self, "actor_mask", _frozen(self.actor_mask, bool))
        object.__setattr__(self, "group_label", int(self.group_label))
        for name in ("action_labels", "true_action_labels"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(v, np.int64))

    @property
    def n_actors(self):
        return self.joints.shape[0]

    @property
    def n_frames(self):
        return self.joints.shape[1]

    @property
    def n_joints(self):
        return self.joints.shape[2]

    def same_as(self, other):
        """Field-by-field equality (arrays compared exactly)."""

        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (self.clip_id == other.clip_id and self.group_label == other.group_label
                and eq(self.joints, other.joints) and eq(self.actor_mask, other.actor_mask)
                and eq(self.action_labels, other.action_labels)
                and eq(self.true_action_labels, other.true_action_labels))


@dataclass(frozen=True, eq=False)
class Dataset:
    clips: tuple
    layout: SkeletonLayout
    group_classes: tuple
    action_classes: tuple
    n_actors: int
    n_frames: int
    label_flip_map: dict | None = None
    pseudo_labeled: bool = False  # action labels are cluster ids, not annotations

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "group_classes", tuple(self.group_classes))
        object.__setattr__(self, "action_classes", tuple(self.action_classes))

    def __len__(self):
        return len(self.clips)

    @property
    def n_groups(self):
        return len(self.group_classes)

    @property
    def n_actions(self):
        return len(self.action_classes)

    @property
    def has_action_labels(self):
        return any(c.action_labels is not None and (c.action_labels >= 0).any()
                   for c in self.clips)

    def group_labels(self):
        return np.array([c.group_label for c in self.clips], dtype=np.int64)

    def subset(self, indices):
        return replace(self, clips=tuple(self.clips[i] for i in indices))


# ---------------------------------------------------------------------------
# validation

def validate_clip(clip, layout, n_groups=None, n_actions=None):
    """Return a list of human-readable invariant violations (empty when valid)."""
    out = []
    j = clip.joints
    if j.ndim != 4 or j.shape[3] != 3:
        return [f"{clip.clip_id}: joints must be (K, T, N, 3), got {j.shape}"]
    K, T, N, _ = j.shape
    if N != layout.n_joints:
        out.append(f"{clip.clip_id}: joints has N={N}, layout expects {layout.n_joints}")
    if clip.actor_mask.shape != (K,):
        out.append(f"{clip.clip_id}: actor_mask has shape {clip.actor_mask.shape}, expected ({K},)")
        return out
    bad = np.argwhere(~np.isfinite(j))
    for k, t, n, c in bad[:10]:
        out.append(f"{clip.clip_id}: non-finite value at actor {k} frame {t} joint {n} channel {c}")
    p = j[..., 2]
    for k, t, n in np.argwhere(~((p >= 0) & (p <= 1)) & np.isfinite(p))[:10]:
        out.append(f"{clip.clip_id}: p={p[k, t, n]!r} outside [0, 1] at actor {k} frame {t} joint {n}")
    for k in np.flatnonzero(~clip.actor_mask):
        if np.any(j[k] != 0):
            out.append(f"{clip.clip_id}: padding actor {k} has non-zero joints")
    if n_groups is not None and not 0 <= clip.group_label < n_groups:
        out.append(f"{clip.clip_id}: group_label {clip.group_label} outside [0, {n_groups})")
    if clip.action_labels is not None:
        a = clip.action_labels
        if a.shape != (K,):
            out.append(f"{clip.clip_id}: action_labels has shape {a.shape}, expected ({K},)")
        else:
            for k in range(K):
                if not clip.actor_mask[k] and a[k] != -1:
                    out.append(f"{clip.clip_id}: action_labels[{k}]={a[k]} on masked-out actor")
                elif a[k] < -1 or (n_actions is not None and a[k] >= n_actions):
                    out.append(f"{clip.clip_id}: action_labels[{k}]={a[k]} outside [0, {n_actions})")
    return out


# ---------------------------------------------------------------------------
# JSON files

def clip_to_json(clip):
    actors = []
    for k in np.flatnonzero(clip.actor_mask):
        label = None
        if clip.action_labels is not None and clip.action_labels[k] >= 0:
            label = int(clip.action_labels[k])
        actors.append({"action_label": label, "frames": clip.joints[k].tolist()})
    doc = {"clip_id": clip.clip_id, "group_label": clip.group_label, "actors": actors}
    return json.dumps(doc, separators=(",", ":"))


def _clip_from_doc(doc, source, n_actors, n_frames, n_joints):
    def fail(msg):
        cid = doc.get("clip_id", "?") if isinstance(doc, dict) else "?"
        raise DatasetError(f"{source}: clip {cid!r}: {msg}")

    if not isinstance(doc, dict):
        fail("record is not a JSON object")
    for key in ("clip_id", "group_label", "actors"):
        if key not in doc:
            fail(f"missing field '{key}'")
    if not isinstance(doc["group_label"], int):
        fail("field 'group_label' must be an integer")
    actors = doc["actors"]
    if not isinstance(actors, list) or not actors:
        fail("field 'actors' must be a non-empty list")
    arrays, labels = [], []
    for i, a in enumerate(actors):
        if not isinstance(a, dict) or "frames" not in a:
            fail(f"actors[{i}] missing field 'frames'")
        try:
            arr = np.array(a["frames"], dtype=np.float64)
        except (TypeError, ValueError):
            fail(f"actors[{i}].frames is not a rectangular numeric array")
        if arr.ndim != 3 or arr.shape[2] != 3:
            fail(f"actors[{i}].frames must be T x N x 3, got shape {arr.shape}")
        arrays.append(arr)
        lab = a.get("action_label")
        if lab is not None and not isinstance(lab, int):
            fail(f"actors[{i}].action_label must be an integer or null")
        labels.append(-1 if lab is None else lab)
    shapes = {arr.shape for arr in arrays}
    if len(shapes) != 1:
        fail(f"actors disagree on frames shape: {sorted(shapes)}")
    t_clip, n_clip, _ = arrays[0].shape
    if n_joints is not None and n_clip != n_joints:
        fail(f"field 'frames' has N={n_clip} joints, expected {n_joints}")
    T = t_clip if n_frames is None else n_frames
    if t_clip < T:
        fail(f"field 'frames' has {t_clip} frames, fewer than T={T}")
    start = (t_clip - T) // 2
    K = len(arrays) if n_actors is None else n_actors
    if len(arrays) > K:
        fail(f"field 'actors' has {len(arrays)} actors, more than K={K}")
    joints = np.zeros((K, T, n_clip, 3))
    for i, arr in enumerate(arrays):
        joints[i] = arr[start:start + T]
    mask = np.zeros(K, dtype=bool)
    mask[:len(arrays)] = True
    action = np.full(K, -1, dtype=np.int64)
    action[:len(arrays)] = labels
    has_labels = any(lab >= 0 for lab in labels)
    return ClipRecord(str(doc["clip_id"]), joints, doc["group_label"], mask,
                      action if has_labels else None)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"path not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None


def load_dataset(path, layout=None, n_actors=None, n_frames=None):
    """Load a dataset directory (manifest.json), a manifest file, or a single clip file.

    For a single clip file the class lists are unknown, so label ranges are only
    checked for sign; K and T default to the clip's own sizes.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"path not found: {path}")
    if path.is_dir():
        path = path / "manifest.json"
        if not path.exists():
            raise DatasetError(f"path not found: {path}")
    doc = _read_json(path)
    if isinstance(doc, dict) and "clips" in doc:
        return _load_manifest(doc, path, layout, n_actors, n_frames)
    layout = layout or SkeletonLayout()
    clip = _clip_from_doc(doc, path, n_actors, n_frames, layout.n_joints)
    if clip.group_label < 0:
        raise DatasetError(f"{path}: clip {clip.clip_id!r}: group_label {clip.group_label} out of range")
    G = clip.group_label + 1
    A = 0 if clip.action_labels is None else int(clip.action_labels.max()) + 1
    ds = Dataset((clip,), layout, tuple(f"group_{i}" for i in range(G)),
                 tuple(f"action_{i}" for i in range(A)), clip.n_actors, clip.n_frames)
    _check_all(ds, path)
    return ds


def _load_manifest(doc, path, layout, n_actors, n_frames):
    for key in ("group_classes", "action_classes", "clips"):
        if key not in doc:
            raise DatasetError(f"{path}: manifest missing field '{key}'")
    if layout is None:
        layout = SkeletonLayout.from_dict(doc["layout"]) if "layout" in doc else SkeletonLayout()
    K = n_actors if n_actors is not None else doc.get("n_actors")
    T = n_frames if n_frames is not None else doc.get("n_frames")
    root = path.parent
    clips = []
    for rel in doc["clips"]:
        clip_doc = _read_json(root / rel)
        clips.append(_clip_from_doc(clip_doc, root / rel, K, T, layout.n_joints))
    if K is None:
        K = max((c.n_actors for c in clips), default=0)
        clips = [_pad(c, K) for c in clips]
    if T is None:
        ts = {c.n_frames for c in clips}
        if len(ts) > 1:
            raise DatasetError(f"{path}: inconsistent T across clips: {sorted(ts)}")
        T = ts.pop() if ts else 0
    ds = Dataset(tuple(clips), layout, tuple(doc["group_classes"]),
                 tuple(doc["action_classes"]), int(K), int(T), doc.get("label_flip_map"))
    _check_all(ds, path)
    return ds


def _pad(clip, K):
    if clip.n_actors == K:
        return clip
    joints = np.zeros((K,) + clip.joints.shape[1:])
    joints[:clip.n_actors] = clip.joints
    mask = np.zeros(K, dtype=bool)
    mask[:clip.n_actors] = clip.actor_mask
    action = None
    if clip.action_labels is not None:
        action = np.full(K, -1, dtype=np.int64)
        action[:clip.n_actors] = clip.action_labels
    return replace(clip, joints=joints, actor_mask=mask, action_labels=action)


def _check_all(ds, source):
    G = ds.n_groups
    A = ds.n_actions if ds.action_classes else None
    for clip in ds.clips:
        problems = validate_clip(clip, ds.layout, G, A)
        if problems:
            raise DatasetError(f"{source}: " + "; ".join(problems))
    ids = [c.clip_id for c in ds.clips]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{source}: duplicate clip_id values")
    fm = ds.label_flip_map
    if fm:
        for key, n in (("group", G), ("action", ds.n_actions)):
            m = fm.get(key)
            if m is not None and sorted(m) != list(range(n)):
                raise DatasetError(f"{source}: label_flip_map['{key}'] is not a permutation of {n} classes")


def _clip_filename(clip_id):
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in clip_id)
    return f"clips/{safe}.json"


def write_dataset(ds, out_dir):
    """Write manifest.json and one JSON file per clip; returns the manifest path."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    names = []
    for clip in ds.clips:
        name = _clip_filename(clip.clip_id)
        if name in names:
            raise DatasetError(f"clip id {clip.clip_id!r} collides with another after sanitizing")
        names.append(name)
        (out / name).write_text(clip_to_json(clip) + "\n")
    manifest = {
        "format": FORMAT_TAG,
        "layout": ds.layout.to_dict(),
        "group_classes": list(ds.group_classes),
        "action_classes": list(ds.action_classes),
        "label_flip_map": ds.label_flip_map,
        "n_actors": ds.n_actors,
        "n_frames": ds.n_frames,
        "clips": names,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SyntheticConfig:
    n_clips: int = 80
    K: int = 6
    T: int = 10
    N: int = 25
    G: int = 4
    A: int = 4
    noise_std: float = 0.02
    seed: int = 0
    min_actors: int | None = None  # None -> every clip has K real actors
    motif_amplitude: float = 0.3
    formation_spacing: float = 2.5
    anchor_jitter: float = 0.25


def synthetic_layout(n_joints):
    return SkeletonLayout.body25() if n_joints == 25 else SkeletonLayout.generic(n_joints)


def _body25_template():
    t = np.zeros((25, 2))
    right = {2: (0.40, -0.95), 3: (0.55, -0.55), 4: (0.60, -0.15), 9: (0.20, 0.0),
             10: (0.22, 0.60), 11: (0.22, 1.20), 15: (0.07, -1.42), 17: (0.14, -1.38),
             22: (0.28, 1.28), 23: (0.34, 1.26), 24: (0.20, 1.24)}
    t[0] = (0.0, -1.35)
    t[1] = (0.0, -1.0)
    t[8] = (0.0, 0.0)
    swap = _swap_from_pairs(25, _BODY25_PAIRS)
    for r, (x, y) in right.items():
        # image coordinates: the person's right side appears on the left
        t[r] = (-x, y)
        t[swap[r]] = (x, y)
    groups = [
        {4: (0.0, -1.0), 7: (0.0, -1.0), 3: (0.0, -0.5), 6: (0.0, -0.5)},     # arms raise
        {10: (0.0, -0.5), 13: (0.0, -0.5), 11: (0.0, -1.0), 14: (0.0, -1.0),
         22: (0.0, -1.0), 19: (0.0, -1.0)},                                      # legs tuck
        {4: (-1.0, 0.0), 7: (1.0, 0.0), 3: (-0.5, 0.0), 6: (0.5, 0.0)},       # arms swing out
        {0: (0.0, 1.0), 15: (0.0, 1.0), 16: (0.0, 1.0), 17: (0.0, 1.0),
         18: (0.0, 1.0)},                                                        # head nod
    ]
    return t, groups


def _generic_template(layout):
    n = layout.n_joints
    rng = np.random.default_rng(12345)
    t = np.zeros((n, 2))
    t[layout.neck_index] = (0.0, -1.0)
    seen = {layout.mid_hip_index, layout.neck_index}
    pairs = []
    for j in range(n):
        if j in seen:
            continue
        m = layout.lr_swap[j]
        seen.update((j, m))
        x, y = rng.uniform(0.1, 0.7), rng.uniform(-1.4, 1.2)
        if m == j:
            t[j] = (0.0, y)
        else:
            t[j], t[m] = (-x, y), (x, y)
        pairs.append((j, m))
    groups = [{} for _ in range(4)]
    for i, (j, m) in enumerate(pairs):
        g = i % 4
        if g == 2:
            groups[g][j] = (-1.0, 0.0)
            groups[g][m] = (1.0, 0.0) if m != j else (0.0, 1.0)
        else:
            groups[g][j] = groups[g][m] = (0.0, -1.0)
    return t, [g for g in groups if g] or [{0: (0.0, 1.0)}]


def synthetic_motifs(layout, A):
    """Per-motif (direction field (N, 2), cycles per clip).  Every motif is mirror-symmetric."""
    if layout == SkeletonLayout.body25():
        template, groups = _body25_template()
    else:
        template, groups = _generic_template(layout)
    motifs = []
    for a in range(A):
        field_ = np.zeros((layout.n_joints, 2))
        for j, d in groups[a % len(groups)].items():
            field_[j] = d
        motifs.append((field_, 1 + a // len(groups)))
    return template, motifs


def synthetic_formations(cfg):
    """Anchor positions (n_formations, K, 2), each symmetric about x = 0."""
    n_form = 2 if cfg.G % 2 == 0 else 1
    x = cfg.formation_spacing * (np.arange(cfg.K) - (cfg.K - 1) / 2)
    forms = []
    for f in range(n_form):
        bend = 0.15 * f
        y = bend * (x ** 2 - np.mean(x ** 2))
        forms.append(np.stack([x, y], axis=1))
    return np.array(forms)


def synthetic_recipe(cfg):
    """Class id -> (formation index, tuple of motif ids that the class draws from)."""
    n_form = len(synthetic_formations(cfg))
    n_sets = cfg.G // n_form
    step = max(1, cfg.A // n_sets)
    size = min(cfg.A - 1, max(2, cfg.A // n_sets + 1))
    recipe = []
    for g in range(cfg.G):
        s = g // n_form
        motifs = tuple(sorted({(s * step + j) % cfg.A for j in range(size)}))
        recipe.append((g % n_form, motifs))
    return recipe


def _check_synthetic(cfg):
    problems = []
    if cfg.n_clips < 0:
        problems.append("n_clips must be >= 0")
    if cfg.G < 2:
        problems.append("G must be >= 2")
    if cfg.A < 2:
        problems.append("A must be >= 2")
    if cfg.K < 2:
        problems.append("K must be >= 2")
    if cfg.T < 2:
        problems.append("T must be >= 2")
    if cfg.N < 3:
        problems.append("N must be >= 3")
    if cfg.noise_std < 0:
        problems.append("noise_std must be >= 0")
    if cfg.min_actors is not None and not 2 <= cfg.min_actors <= cfg.K:
        problems.append("min_actors must lie in [2, K]")
    if not problems and cfg.G // (2 if cfg.G % 2 == 0 else 1) > cfg.A:
        problems.append("G too large for A: need G <= 2*A (even G) or G <= A (odd G)")
    if problems:
        raise DatasetError("invalid synthetic config: " + "; ".join(problems))


def generate_synthetic(cfg):
    """Deterministic synthetic dataset in which a group class is a formation plus a motif set.

    Each clip places its actors on the class formation's anchors (jittered), gives
    every actor one motif from the class motif set (all set members present when
    K allows), applies a random phase per actor, per-actor depth scale, a global
    scale and translation, then Gaussian coordinate noise.
    """
    _check_synthetic(cfg)
    layout = synthetic_layout(cfg.N)
    template, motifs = synthetic_motifs(layout, cfg.A)
    forms = synthetic_formations(cfg)
    recipe = synthetic_recipe(cfg)
    rng = np.random.default_rng(cfg.seed)
    labels = np.arange(cfg.n_clips) % cfg.G
    rng.shuffle(labels)
    t = np.arange(cfg.T)
    width = len(str(max(cfg.n_clips - 1, 0)))
    clips = []
    for i, g in enumerate(labels):
        form_id, motif_set = recipe[g]
        k_real = cfg.K if cfg.min_actors is None else int(rng.integers(cfg.min_actors, cfg.K + 1))
        slots = np.sort(rng.permutation(cfg.K)[:k_real])
        anchors = forms[form_id][slots] + rng.normal(0.0, cfg.anchor_jitter, (k_real, 2))
        assign = np.resize(np.array(motif_set), k_real)
        rng.shuffle(assign)
        order = rng.permutation(k_real)
        scale_g = rng.uniform(0.8, 1.25)
        offset = rng.uniform(-50.0, 50.0, 2)
        joints = np.zeros((cfg.K, cfg.T, cfg.N, 3))
        action = np.full(cfg.K, -1, dtype=np.int64)
        for slot, k in enumerate(order):
            a = int(assign[slot])
            field_, cycles = motifs[a]
            phase = rng.uniform(0, 2 * math.pi)
            s = rng.uniform(0.85, 1.15)
            wave = np.sin(2 * math.pi * cycles * t / cfg.T + phase)
            pose = template[None] + cfg.motif_amplitude * wave[:, None, None] * field_[None]
            xy = scale_g * (anchors[slot] + s * pose) + offset
            xy = xy + rng.normal(0.0, cfg.noise_std, xy.shape)
            joints[k, :, :, :2] = xy
            joints[k, :, :, 2] = rng.uniform(0.6, 1.0, (cfg.T, cfg.N))
            action[k] = a
        mask = np.zeros(cfg.K, dtype=bool)
        mask[:k_real] = True
        clips.append(ClipRecord(f"syn{cfg.seed}_{i:0{width}d}", joints, int(g), mask, action))
    group_classes = tuple(f"form{f}_set{'-'.join(map(str, m))}" for f, m in recipe)
    action_classes = tuple(f"motif{a}" for a in range(cfg.A))
    return Dataset(tuple(clips), layout, group_classes, action_classes, cfg.K, cfg.T, None)


# ---------------------------------------------------------------------------
# splitting

def split_dataset(ds, train_fraction, seed):
    """Stratified, seeded split into (train, rest); each class keeps >= 1 clip per side."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError("train_fraction must lie strictly between 0 and 1")
    labels = ds.group_labels()
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for g in np.unique(labels):
        idx = np.flatnonzero(labels == g)
        if len(idx) < 2:
            raise DatasetError(f"class {g} has {len(idx)} clip(s); stratified split needs >= 2")
        idx = rng.permutation(idx)
        n_train = int(round(train_fraction * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    return ds.subset(sorted(train_idx)), ds.subset(sorted(test_idx))


def stack_clips(ds):
    """Dense arrays for a whole dataset: joints (n, K, T, N, 3), mask, group labels, action labels."""
    n = len(ds.clips)
    joints = np.zeros((n, ds.n_actors, ds.n_frames, ds.layout.n_joints, 3))
    mask = np.zeros((n, ds.n_actors), dtype=bool)
    action = np.full((n, ds.n_actors), -1, dtype=np.int64)
    for i, c in enumerate(ds.clips):
        joints[i] = c.joints
        mask[i] = c.actor_mask
        if c.action_labels is not None:
            action[i] = c.action_labels
    return joints, mask, ds.group_labels(), action
