"""Fixtures shared by the test modules: random clips and transforms."""
from dataclasses import replace

import numpy as np

from skelgar.dataset import ClipRecord, SkeletonLayout

CRITERIA_LINES = []


def random_clip(rng, K=5, T=6, N=25, n_real=None, with_dropouts=True):
    """Random valid clip with raw pixel-scale coordinates; returns (clip, layout)."""
    layout = SkeletonLayout.body25() if N == 25 else SkeletonLayout.generic(N)
    n_real = int(rng.integers(1, K + 1)) if n_real is None else n_real
    joints = np.zeros((K, T, N, 3))
    real = np.zeros(K, bool)
    real[rng.permutation(K)[:n_real]] = True
    for k in np.flatnonzero(real):
        center = rng.uniform(-500, 500, 2)
        joints[k, :, :, :2] = center + rng.normal(0, 40, (T, N, 2))
        joints[k, :, :, 2] = rng.uniform(0.05, 1.0, (T, N))
        if with_dropouts:
            drop = rng.random((T, N)) < 0.1
            drop[:, [layout.mid_hip_index, layout.neck_index]] = False
            joints[k][drop] = 0.0
    labels = np.where(real, rng.integers(3, size=K), -1)
    clip = ClipRecord(f"rand{int(rng.integers(1 << 30))}", joints, int(rng.integers(3)), real, labels)
    return clip, layout


def similarity_per_actor(clip, rng):
    """Independent translation and positive uniform scaling of each actor's raw x, y."""
    j = clip.joints.copy()
    for k in np.flatnonzero(clip.actor_mask):
        visible = j[k, :, :, 2] > 0
        xy = (j[k, :, :, :2] + rng.uniform(-300, 300, 2)) * rng.uniform(0.3, 3.0)
        j[k, :, :, :2] = np.where(visible[..., None], xy, 0.0)
    return replace(clip, joints=j)
