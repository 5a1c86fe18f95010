"""Run configuration: one JSON file with optional sections, validated up front.

Schema (every key optional; unknown keys are errors)::

    {
      "synthetic": {"n_clips", "K", "T", "N", "G", "A", "noise_std", "seed", "min_actors",
                    "motif_amplitude", "formation_spacing", "anchor_jitter"},
      "model":     {"branch": [c1, c2, c3, c4], "temporal_kernel", "fusion_hidden", "F"},
      "train":     {"epochs", "batch_size", "lr0", "beta1", "beta2", "epsilon", "lam", "mode",
                    "use_gd", "augment", "label_source", "seed", "threads"},
      "pseudo":    {"pca_dim", "k", "max_iters", "restarts", "seed"},
      "experiment": {"train_fraction", "split_seed", "seeds": [...], "ks": [...],
                     "ablation": [{"name": str, "train": {train overrides}}, ...]}
    }

K, T, N, A and G of the model always come from the dataset being used.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

from .dataset import SyntheticConfig
from .model import ModelConfig
from .pseudo import PseudoConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


MODEL_KEYS = ("branch", "temporal_kernel", "fusion_hidden", "F")
HYPER_KEYS = ("lr0", "beta1", "beta2", "epsilon")
TRAIN_KEYS = ("epochs", "batch_size", "lam", "mode", "use_gd", "augment", "label_source", "seed",
              "threads") + HYPER_KEYS
EXPERIMENT_KEYS = ("train_fraction", "split_seed", "seeds", "ks", "ablation")

DEFAULT_ABLATION = (
    {"name": "supervised", "train": {"mode": "end_to_end", "label_source": "ground_truth"}},
    {"name": "pseudo", "train": {"mode": "end_to_end", "label_source": "pseudo"}},
    {"name": "group_only", "train": {"mode": "group_only", "label_source": "none"}},
    {"name": "two_stage", "train": {"mode": "two_stage", "label_source": "ground_truth"}},
    {"name": "end_to_end_without_gd", "train": {"mode": "end_to_end", "use_gd": False}},
)


@dataclass(frozen=True)
class Experiment:
    train_fraction: float = 0.75
    split_seed: int = 0
    seeds: tuple = (0,)
    ks: tuple = ()
    ablation: tuple = DEFAULT_ABLATION


@dataclass(frozen=True)
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: dict = field(default_factory=dict)  # architecture overrides only
    train: TrainConfig = field(default_factory=TrainConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    experiment: Experiment = field(default_factory=Experiment)

    def model_config(self, ds, A=None):
        """ModelConfig for dataset geometry plus the architecture overrides."""
        return ModelConfig(K=ds.n_actors, T=ds.n_frames, N=ds.layout.n_joints,
                           A=A if A is not None else max(ds.n_actions, 2), G=ds.n_groups,
                           lam=self.train.lam, **self.model)


def _check_keys(section, doc, allowed):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section!r} must be an object")
    bad = sorted(set(doc) - set(allowed))
    if bad:
        raise ConfigError(f"unknown key {section}.{bad[0]}" if section else f"unknown key {bad[0]}")


def _build(section, cls, doc):
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from None


def _types(section, doc, spec):
    for key, kinds in spec.items():
        if key in doc:
            v = doc[key]
            ok = isinstance(v, kinds) and not (isinstance(v, bool) and bool not in _flat(kinds))
            if not ok:
                raise ConfigError(f"{section}.{key} has wrong type {type(v).__name__}")


def _flat(kinds):
    return kinds if isinstance(kinds, tuple) else (kinds,)


NUM = (int, float)
SYN_TYPES = {"n_clips": int, "K": int, "T": int, "N": int, "G": int, "A": int, "noise_std": NUM,
             "seed": int, "min_actors": (int, type(None)), "motif_amplitude": NUM,
             "formation_spacing": NUM, "anchor_jitter": NUM}
TRAIN_TYPES = {"epochs": int, "batch_size": int, "lam": NUM, "mode": str, "use_gd": bool,
               "augment": bool, "label_source": str, "seed": int, "threads": int,
               "lr0": NUM, "beta1": NUM, "beta2": NUM, "epsilon": NUM}
PSEUDO_TYPES = {"pca_dim": int, "k": int, "max_iters": int, "restarts": int, "seed": int}
MODEL_TYPES = {"branch": list, "temporal_kernel": int, "fusion_hidden": int, "F": int}


def build_train_config(doc, base=None):
    _check_keys("train", doc, TRAIN_KEYS)
    _types("train", doc, TRAIN_TYPES)
    base = base or TrainConfig()
    hyper_doc = {k: doc[k] for k in HYPER_KEYS if k in doc}
    rest = {k: v for k, v in doc.items() if k not in HYPER_KEYS}
    try:
        hyper = replace(base.hyper, **hyper_doc)
        return replace(base, hyper=hyper, **rest)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train settings: {exc}") from None


def parse_config(doc):
    """Validate a config document (already parsed JSON) into a RunConfig."""
    _check_keys("", doc, ("synthetic", "model", "train", "pseudo", "experiment"))
    syn = doc.get("synthetic", {})
    _check_keys("synthetic", syn, [f.name for f in fields(SyntheticConfig)])
    _types("synthetic", syn, SYN_TYPES)
    model = dict(doc.get("model", {}))
    _check_keys("model", model, MODEL_KEYS)
    _types("model", model, MODEL_TYPES)
    if "branch" in model:
        model["branch"] = tuple(model["branch"])
    try:
        ModelConfig(**model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model settings: {exc}") from None
    pseudo = doc.get("pseudo", {})
    _check_keys("pseudo", pseudo, [f.name for f in fields(PseudoConfig)])
    _types("pseudo", pseudo, PSEUDO_TYPES)
    exp = dict(doc.get("experiment", {}))
    _check_keys("experiment", exp, EXPERIMENT_KEYS)
    if "train_fraction" in exp and not 0 < exp["train_fraction"] < 1:
        raise ConfigError("experiment.train_fraction must be in (0, 1)")
    for key in ("seeds", "ks"):
        if key in exp:
            if not isinstance(exp[key], list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                          for v in exp[key]):
                raise ConfigError(f"experiment.{key} must be a list of integers")
            exp[key] = tuple(exp[key])
    train = build_train_config(doc.get("train", {}))
    if "ablation" in exp:
        rows = exp["ablation"]
        if not isinstance(rows, list):
            raise ConfigError("experiment.ablation must be a list")
        for i, row in enumerate(rows):
            _check_keys(f"experiment.ablation[{i}]", row, ("name", "train"))
            if not isinstance(row.get("name"), str):
                raise ConfigError(f"experiment.ablation[{i}].name must be a string")
            build_train_config(row.get("train", {}), train)
        exp["ablation"] = tuple(rows)
    return RunConfig(synthetic=_build("synthetic", SyntheticConfig, syn), model=model, train=train,
                     pseudo=_build("pseudo", PseudoConfig, pseudo),
                     experiment=_build("experiment", Experiment, exp))


def load_config(path):
    """Read and validate a JSON config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(doc)


def ablation_configs(run):
    """[(name, TrainConfig)] for the experiment's ablation rows."""
    return [(row["name"], build_train_config(row.get("train", {}), run.train))
            for row in run.experiment.ablation]
