"""Declarative run configuration: one YAML file with named sections.

Sections: ``dataset``, ``model``, ``train``, ``loss``, ``experiment`` plus a
top-level ``output_dir``. Any leaf can be overridden with a dotted key,
e.g. ``train.epochs=20``; the value is parsed as YAML.
"""

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from camri.data import load_csv, load_idx, make_blobs, normalize_pixels
from camri.errors import ConfigError
from camri.experiment import ALL_METHODS
from camri.losses import LOSS_KINDS
from camri.network import ModelConfig, TrainConfig

OUTPUT_ROOT_ENV = "CAMRI_OUTPUT_ROOT"

DEFAULTS = {
    "output_dir": "runs/default",
    "dataset": {
        "kind": "blobs",
        "classes": 3,
        "per_class": 600,
        "input_dim": 8,
        "center_radius": 3.0,
        "sigma": 1.0,
        "overlap": [0, 1, 0.6],
        "seed": 0,
        "train_fraction": 0.7,
        "images": None,
        "labels": None,
        "path": None,
        "limit": None,
    },
    "model": {"hidden": [64, 64], "feature_dim": 16, "feature_activation": "linear"},
    "train": {"batch_size": 64, "epochs": 100, "lr": 0.001, "seed": 0, "shuffle": True},
    "loss": {"kind": "ce", "params": {}, "kappa": 0, "methods": None, "grid": None, "lambdas": [0.1]},
    "experiment": {"seeds": [0, 1, 2, 3, 4], "kappa": "auto", "targets": ["worst1"], "jobs": 1, "per_seed": False},
}

ROLES = ("worst1", "worst2", "median")


@dataclass
class RunConfig:
    raw: dict
    source: str = "<memory>"
    dataset: dict = field(init=False)
    model: ModelConfig = field(init=False)
    train: TrainConfig = field(init=False)
    loss: dict = field(init=False)
    experiment: dict = field(init=False)

    def __post_init__(self):
        _validate(self.raw)
        self.dataset = self.raw["dataset"]
        m = self.raw["model"]
        self.model = ModelConfig(
            input_dim=1,
            hidden=tuple(m["hidden"]),
            feature_dim=m["feature_dim"],
            feature_activation=m["feature_activation"],
        )
        self.train = TrainConfig(**self.raw["train"])
        self.loss = self.raw["loss"]
        self.experiment = self.raw["experiment"]

    @property
    def output_dir(self):
        out = Path(self.raw["output_dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    @property
    def methods(self):
        methods = self.loss.get("methods")
        if methods is None:
            return [self.loss["kind"]]
        if methods == "all-methods":
            return list(ALL_METHODS)
        return list(methods)


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config field {name!r}", field=name)
        if isinstance(out[key], dict) and key != "params":
            if not isinstance(value, dict):
                raise ConfigError(f"{name} must be a section", field=name)
            out[key] = _merge(out[key], value, f"{name}.")
        else:
            out[key] = value
    return out


def _require(cond, field_name, message):
    if not cond:
        raise ConfigError(f"{field_name}: {message}", field=field_name)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _validate(raw):
    ds = raw["dataset"]
    _require(ds["kind"] in ("blobs", "idx", "csv"), "dataset.kind", "must be blobs, idx or csv")
    if ds["kind"] == "blobs":
        _require(_is_int(ds["classes"]) and ds["classes"] >= 2, "dataset.classes", "integer >= 2 required")
        _require(_is_int(ds["per_class"]) and ds["per_class"] >= 2, "dataset.per_class", "integer >= 2 required")
        _require(_is_int(ds["input_dim"]) and ds["input_dim"] >= 1, "dataset.input_dim", "integer >= 1 required")
        _require(isinstance(ds["sigma"], (int, float)) and ds["sigma"] > 0, "dataset.sigma", "must be positive")
        if ds["overlap"] is not None:
            _require(isinstance(ds["overlap"], list) and len(ds["overlap"]) == 3, "dataset.overlap", "must be [a, b, shift]")
    elif ds["kind"] == "idx":
        for key in ("images", "labels"):
            _require(ds[key] is not None, f"dataset.{key}", "path is required for idx datasets")
            _require(Path(ds[key]).is_file(), f"dataset.{key}", f"file not found: {ds[key]}")
    else:
        _require(ds["path"] is not None, "dataset.path", "path is required for csv datasets")
        _require(Path(ds["path"]).is_file(), "dataset.path", f"file not found: {ds['path']}")
    frac = ds["train_fraction"]
    _require(isinstance(frac, (int, float)) and 0 < frac < 1, "dataset.train_fraction", "must lie in (0, 1)")

    tr = raw["train"]
    for key in ("batch_size", "epochs"):
        _require(_is_int(tr[key]) and tr[key] >= 1, f"train.{key}", "integer >= 1 required")
    _require(isinstance(tr["lr"], (int, float)) and tr["lr"] >= 0, "train.lr", "must be >= 0")
    _require(_is_int(tr["seed"]), "train.seed", "integer required")

    m = raw["model"]
    _require(isinstance(m["hidden"], list) and all(_is_int(h) and h >= 1 for h in m["hidden"]), "model.hidden", "list of positive integers required")
    _require(_is_int(m["feature_dim"]) and m["feature_dim"] >= 1, "model.feature_dim", "integer >= 1 required")

    loss = raw["loss"]
    _require(loss["kind"] in LOSS_KINDS, "loss.kind", f"must be one of {', '.join(LOSS_KINDS)}")
    _require(isinstance(loss["params"], dict), "loss.params", "must be a mapping")
    methods = loss["methods"]
    if methods is not None and methods != "all-methods":
        _require(
            isinstance(methods, list) and methods and all(k in LOSS_KINDS for k in methods),
            "loss.methods",
            "must be 'all-methods' or a list of loss kinds",
        )

    grid = loss["grid"]
    if grid is not None:
        _require(
            isinstance(grid, list) and grid and all(isinstance(p, dict) for p in grid),
            "loss.grid",
            "must be a non-empty list of parameter mappings",
        )
    lambdas = loss["lambdas"]
    _require(
        isinstance(lambdas, list) and lambdas and all(isinstance(v, (int, float)) and v > 0 for v in lambdas),
        "loss.lambdas",
        "non-empty list of positive numbers required",
    )

    ex = raw["experiment"]
    _require(isinstance(ex["seeds"], list) and ex["seeds"] and all(_is_int(s) for s in ex["seeds"]), "experiment.seeds", "non-empty list of integers required")
    kappa = ex["kappa"]
    _require(
        kappa == "auto" or _is_int(kappa) or (isinstance(kappa, list) and all(_is_int(k) for k in kappa)),
        "experiment.kappa",
        "must be 'auto', an integer or a list of integers",
    )
    _require(all(t in ROLES for t in ex["targets"]), "experiment.targets", f"entries must be among {ROLES}")
    _require(_is_int(ex["jobs"]) and ex["jobs"] >= 1, "experiment.jobs", "integer >= 1 required")


def parse_override(text):
    """``section.key=value`` -> (path list, parsed value)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    key = key.lstrip("-")
    try:
        parsed = yaml.safe_load(value) if value != "" else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {value!r}", field=key) from exc
    return key.split("."), parsed


def _set_path(tree, path, value):
    node = tree
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {'.'.join(path)} descends into a non-section", field=".".join(path))
    node[path[-1]] = value


def load_config(path, overrides=()):
    """Read, merge with defaults, apply overrides and validate a YAML run config."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        user = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        where = f" line {line}" if line else ""
        raise ConfigError(f"{path}:{where} YAML syntax error: {getattr(exc, 'problem', exc)}", line=line) from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    for item in overrides:
        keys, value = parse_override(item)
        _set_path(user, keys, value)
    merged = _merge(DEFAULTS, user)
    base = Path(path).resolve().parent
    ds = merged["dataset"]
    for key in ("images", "labels", "path"):
        if ds[key] is not None and not Path(ds[key]).is_absolute():
            ds[key] = str(base / ds[key])
    return RunConfig(merged, source=str(path))


def build_dataset(cfg):
    ds = cfg.dataset
    if ds["kind"] == "blobs":
        overlap = tuple(ds["overlap"]) if ds["overlap"] is not None else None
        data = make_blobs(
            ds["classes"],
            ds["per_class"],
            ds["input_dim"],
            center_radius=float(ds["center_radius"]),
            sigma=float(ds["sigma"]),
            overlap=overlap,
            seed=ds["seed"],
        )
    elif ds["kind"] == "idx":
        data = normalize_pixels(load_idx(ds["images"], ds["labels"]))
    else:
        data = load_csv(ds["path"])
    if ds["limit"]:
        data = data.subset(slice(0, int(ds["limit"])))
    return data
