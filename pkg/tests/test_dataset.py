import json

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from skelgar.dataset import (ClipRecord, Dataset, DatasetError, SkeletonLayout, SyntheticConfig,
                             generate_synthetic, load_dataset, split_dataset, synthetic_formations,
                             synthetic_motifs, synthetic_recipe, validate_clip, write_dataset)
from skelgar.streams import normalize_frames


def clip_doc(clip_id="c0", K=2, T=3, N=25, group=1, labels=(0, 1), seed=0):
    rng = np.random.default_rng(seed)
    actors = []
    for k in range(K):
        frames = np.concatenate([rng.uniform(-5, 5, (T, N, 2)), rng.uniform(0.1, 1, (T, N, 1))], axis=2)
        actors.append({"action_label": labels[k] if labels else None, "frames": frames.tolist()})
    return {"clip_id": clip_id, "group_label": group, "actors": actors}


# --- layout ----------------------------------------------------------------

def test_body25_layout_defaults():
    lay = SkeletonLayout.body25()
    assert (lay.n_joints, lay.mid_hip_index, lay.neck_index) == (25, 8, 1)
    assert lay.lr_swap[2] == 5 and lay.lr_swap[5] == 2
    assert all(lay.lr_swap[lay.lr_swap[i]] == i for i in range(25))


def test_layout_rejects_non_involution():
    swap = list(range(5))
    swap[2], swap[3], swap[4] = 3, 4, 2  # 3-cycle
    with pytest.raises(DatasetError, match="involution"):
        SkeletonLayout(5, 0, 1, tuple(swap))


def test_layout_dict_roundtrip():
    lay = SkeletonLayout.generic(9)
    assert SkeletonLayout.from_dict(lay.to_dict()) == lay


# --- loading ---------------------------------------------------------------

def test_missing_path(tmp_path):
    with pytest.raises(DatasetError, match="path not found"):
        load_dataset(tmp_path / "nope")


def test_single_clip_file_full_mask(tmp_path):
    p = tmp_path / "clip.json"
    p.write_text(json.dumps(clip_doc(K=3, labels=(0, 1, 2))))
    ds = load_dataset(p)
    assert len(ds) == 1
    assert ds.clips[0].actor_mask.tolist() == [True, True, True]


def test_padding_short_clip(tmp_path):
    doc = clip_doc(K=2)
    (tmp_path / "clips").mkdir()
    (tmp_path / "clips" / "a.json").write_text(json.dumps(doc))
    manifest = {"group_classes": ["g0", "g1"], "action_classes": ["a0", "a1"], "n_actors": 4,
                "clips": ["clips/a.json"]}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    ds = load_dataset(tmp_path)
    c = ds.clips[0]
    assert c.actor_mask.tolist() == [True, True, False, False]
    assert np.all(c.joints[2:] == 0)
    assert c.action_labels.tolist() == [0, 1, -1, -1]
    # re-read after writing: padding is stable
    out = tmp_path / "out"
    write_dataset(ds, out)
    again = load_dataset(out)
    assert again.clips[0].same_as(c)


def test_center_crop_and_short_reject(tmp_path):
    doc = clip_doc(T=7)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    ds = load_dataset(p, n_frames=3)
    full = np.array(doc["actors"][0]["frames"])
    np.testing.assert_array_equal(ds.clips[0].joints[0], full[2:5])
    with pytest.raises(DatasetError, match="fewer than T"):
        load_dataset(p, n_frames=9)


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.pop("group_label"), "group_label"),
    (lambda d: d["actors"][0].update(frames=[[1, 2]]), "frames"),
    (lambda d: d["actors"][1].update(action_label="x"), "action_label"),
])
def test_malformed_records_name_the_field(tmp_path, mutate, msg):
    doc = clip_doc(clip_id="bad7")
    mutate(doc)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DatasetError) as exc:
        load_dataset(p)
    assert "bad7" in str(exc.value) and msg in str(exc.value)


def test_label_out_of_range_in_manifest(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_clips=4, K=3, T=3, N=5))
    write_dataset(ds, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["group_classes"] = m["group_classes"][:1]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="group_label"):
        load_dataset(tmp_path)


def test_inconsistent_T(tmp_path):
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "a.json").write_text(json.dumps(clip_doc("a", T=3)))
    (tmp_path / "c" / "b.json").write_text(json.dumps(clip_doc("b", T=4)))
    (tmp_path / "manifest.json").write_text(json.dumps(
        {"group_classes": ["g0", "g1"], "action_classes": ["a0", "a1"], "clips": ["c/a.json", "c/b.json"]}))
    with pytest.raises(DatasetError, match="inconsistent T"):
        load_dataset(tmp_path)


def test_roundtrip_semantic_equality(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_clips=10, K=4, T=5, N=25, min_actors=2, seed=3))
    write_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.group_classes == ds.group_classes and back.action_classes == ds.action_classes
    assert back.layout == ds.layout and (back.n_actors, back.n_frames) == (4, 5)
    assert all(a.same_as(b) for a, b in zip(ds.clips, back.clips))


# --- validation ------------------------------------------------------------

def _valid_clip():
    j = np.zeros((3, 2, 25, 3))
    j[:2, ..., 2] = 0.5
    return ClipRecord("v", j, 0, np.array([True, True, False]), np.array([0, 1, -1]))


def test_validate_valid_clip():
    assert validate_clip(_valid_clip(), SkeletonLayout(), 2, 2) == []


def test_validate_bad_confidence_names_location():
    c = _valid_clip()
    j = c.joints.copy()
    j[1, 0, 3, 2] = 1.5
    c = ClipRecord("v", j, 0, c.actor_mask, c.action_labels)
    problems = validate_clip(c, SkeletonLayout())
    assert len(problems) == 1
    assert "actor 1" in problems[0] and "frame 0" in problems[0] and "joint 3" in problems[0]


def test_validate_label_on_masked_out_actor():
    c = _valid_clip()
    c = ClipRecord("v", c.joints, 0, c.actor_mask, np.array([0, 1, 1]))
    problems = validate_clip(c, SkeletonLayout(), 2, 2)
    assert len(problems) == 1 and "masked-out" in problems[0]


# --- synthetic generator ---------------------------------------------------

def test_synthetic_deterministic_bitwise():
    cfg = SyntheticConfig(n_clips=12, seed=9)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert all(x.joints.tobytes() == y.joints.tobytes() and x.group_label == y.group_label
               for x, y in zip(a.clips, b.clips))


def test_synthetic_byte_identical_files(tmp_path):
    cfg = SyntheticConfig(n_clips=6, K=3, T=4, seed=1)
    write_dataset(generate_synthetic(cfg), tmp_path / "a")
    write_dataset(generate_synthetic(cfg), tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.json")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synthetic_empty():
    ds = generate_synthetic(SyntheticConfig(n_clips=0))
    assert len(ds) == 0 and ds.n_groups == 4 and ds.n_actions == 4


def test_synthetic_balanced_80():
    ds = generate_synthetic(SyntheticConfig(n_clips=80, G=4))
    assert np.bincount(ds.group_labels()).tolist() == [20, 20, 20, 20]


def test_synthetic_validates_and_labels_align():
    ds = generate_synthetic(SyntheticConfig(n_clips=20, min_actors=3, seed=2))
    for c in ds.clips:
        assert validate_clip(c, ds.layout, ds.n_groups, ds.n_actions) == []
        assert np.all((c.action_labels >= 0) == c.actor_mask)


@pytest.mark.parametrize("kw", [dict(G=1), dict(A=1), dict(K=1), dict(n_clips=-1)])
def test_synthetic_invalid_counts(kw):
    with pytest.raises(DatasetError):
        generate_synthetic(SyntheticConfig(**kw))


def test_group_not_decidable_from_single_actor():
    """Every motif occurs in several classes and every formation in several classes."""
    recipe = synthetic_recipe(SyntheticConfig())
    forms = [f for f, _ in recipe]
    assert all(forms.count(f) >= 2 for f in set(forms))
    for a in range(4):
        assert sum(a in m for _, m in recipe) >= 2


def _oracle_label(clip, cfg, layout):
    """Brute-force classifier built from the generator's own formation and motif tables."""
    template, motifs = synthetic_motifs(layout, cfg.A)
    forms = synthetic_formations(cfg)
    real = np.flatnonzero(clip.actor_mask)
    # formation: mid-hip centroids up to scale/translation, matched to anchors
    pos = clip.joints[real, :, layout.mid_hip_index, :2].mean(axis=1)
    pos = (pos - pos.mean(0)) / pos.std()
    best_f, best_r = None, np.inf
    for f, anchors in enumerate(forms):
        cand = anchors[:len(real)] if len(real) == cfg.K else anchors
        cand = (cand - cand.mean(0)) / cand.std()
        cost = ((pos[:, None] - cand[None]) ** 2).sum(-1)
        r, c = linear_sum_assignment(cost)
        if cost[r, c].sum() < best_r:
            best_f, best_r = f, cost[r, c].sum()
    # motifs: least-squares fit of each motif's sin/cos wave to the pose deviation
    gs, _ = normalize_frames(clip.joints, layout)
    t = np.arange(cfg.T)
    found = set()
    for k in real:
        dev = gs[k, :, :, :2] - template[None]
        errs = []
        for fld, cycles in motifs:
            w = 2 * np.pi * cycles * t / cfg.T
            basis = np.stack([np.sin(w)[:, None, None] * fld, np.cos(w)[:, None, None] * fld], -1)
            A = basis.reshape(-1, 2)
            coef, *_ = np.linalg.lstsq(A, dev.ravel(), rcond=None)
            errs.append(np.sum((A @ coef - dev.ravel()) ** 2))
        found.add(int(np.argmin(errs)))
    recipe = synthetic_recipe(cfg)
    return recipe.index((best_f, tuple(sorted(found))))


def test_generator_self_consistency_oracle():
    cfg = SyntheticConfig(n_clips=60, noise_std=0.0, seed=4)
    ds = generate_synthetic(cfg)
    pred = [_oracle_label(c, cfg, ds.layout) for c in ds.clips]
    assert pred == ds.group_labels().tolist()


# --- splitting -------------------------------------------------------------

def test_split_80_stratified():
    ds = generate_synthetic(SyntheticConfig(n_clips=80))
    tr, te = split_dataset(ds, 0.75, 0)
    assert (len(tr), len(te)) == (60, 20)
    assert np.bincount(tr.group_labels()).tolist() == [15] * 4
    ids_tr = {c.clip_id for c in tr.clips}
    ids_te = {c.clip_id for c in te.clips}
    assert not ids_tr & ids_te and len(ids_tr | ids_te) == 80


def test_split_deterministic():
    ds = generate_synthetic(SyntheticConfig(n_clips=40))
    a = split_dataset(ds, 0.5, 7)[0]
    b = split_dataset(ds, 0.5, 7)[0]
    assert [c.clip_id for c in a.clips] == [c.clip_id for c in b.clips]


def test_split_singleton_class_errors():
    ds = generate_synthetic(SyntheticConfig(n_clips=9, G=2))
    clips = list(ds.clips[:9])
    lone = next(c for c in ds.clips if c.group_label == 1)
    clips = [c for c in clips if c.group_label == 0] + [lone]
    small = Dataset(tuple(clips), ds.layout, ds.group_classes, ds.action_classes, ds.n_actors, ds.n_frames)
    with pytest.raises(DatasetError, match="stratified"):
        split_dataset(small, 0.999, 0)
