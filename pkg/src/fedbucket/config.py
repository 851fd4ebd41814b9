"""Experiment configuration files.

Configs are YAML mappings. Every key is checked against :data:`SCHEMA`;
unknown keys and bad values raise :class:`ConfigError` carrying the line of
the offending key. A config may name a shipped ``preset`` to inherit from;
its own keys override the preset's, section by section.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import yaml

from .errors import ConfigError, FedBucketError
from .federation import QUANTISERS, PretrainConfig, RoundConfig
from .model import LocalTrainConfig, ModelSpec

PRESETS = ("mnist-paper-cost", "synthetic-smoke", "dirichlet-sweep")
SWEEP_AXES = ("alpha", "levels", "seeds")

_int = (int,)
_num = (int, float)


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _frac(v):
    return 0 < v < 1


def _one_of(*choices):
    def check(v):
        return v in choices
    check.__doc__ = f"one of {', '.join(map(str, choices))}"
    return check


def _int_list(v):
    return isinstance(v, list) and len(v) > 0 and all(
        isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in v)


def _alpha_list(v):
    return isinstance(v, list) and len(v) > 0 and all(
        (isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0) or x == "iid" for x in v)


def _seed_list(v):
    return isinstance(v, list) and len(v) > 0 and all(
        isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in v)


def _quant_list(v):
    return isinstance(v, list) and len(v) > 0 and all(x in QUANTISERS for x in v)


def _method_list(v):
    return isinstance(v, list) and len(v) > 0 and all(
        x in ("baseline",) + QUANTISERS for x in v)


# key -> (accepted types, extra check, human description of the check)
Field = tuple[tuple, Callable[[Any], bool] | None, str]

SCHEMA: dict[str, Any] = {
    "name": ((str,), None, "a string"),
    "preset": ((str,), _one_of(*PRESETS), f"one of {', '.join(PRESETS)}"),
    "seed": (_int, _nonneg, "an integer >= 0"),
    "dataset": {
        "kind": ((str,), _one_of("synthetic", "idx"), "'synthetic' or 'idx'"),
        "classes": (_int, lambda v: v >= 2, "an integer >= 2"),
        "per_class": (_int, _pos, "an integer >= 1"),
        "test_per_class": (_int, _pos, "an integer >= 1"),
        "feature_dim": (_int, _pos, "an integer >= 1"),
        "spread": (_num, _nonneg, "a number >= 0"),
        "separation": (_num, _pos, "a number > 0"),
        "seed": (_int, _nonneg, "an integer >= 0"),
        "train_images": ((str,), None, "a path"),
        "train_labels": ((str,), None, "a path"),
        "test_images": ((str,), None, "a path"),
        "test_labels": ((str,), None, "a path"),
    },
    "model": {
        "hidden": ((list,), lambda v: isinstance(v, list) and all(
            isinstance(x, int) and x > 0 for x in v), "a list of positive integers"),
        "widths": ((list,), lambda v: _int_list(v) and len(v) >= 2,
                   "a list of >= 2 positive integers"),
        "layer_dims": ((list,), _int_list, "a list of positive integers"),
    },
    "partition": {
        "kind": ((str,), _one_of("iid", "dirichlet"), "'iid' or 'dirichlet'"),
        "alpha": (_num, _pos, "a number > 0"),
    },
    "federation": {
        "total_clients": (_int, _pos, "an integer >= 1"),
        "sampled_per_round": (_int, _pos, "an integer >= 1"),
        "rounds": (_int, _nonneg, "an integer >= 0"),
        "weighted": ((bool,), None, "true or false"),
        "workers": (_int, _pos, "an integer >= 1"),
    },
    "quantiser": {
        "kind": ((str,), _one_of(*QUANTISERS), f"one of {', '.join(QUANTISERS)}"),
        "levels": (_int, _pos, "an integer >= 1"),
        "refresh_period": (_int, _pos, "an integer >= 1"),
        "boundary_bits": (_int, _one_of(16, 32, 64), "16, 32 or 64"),
        "codebook_scope": ((str,), _one_of("layer", "model"), "'layer' or 'model'"),
        "margin": (_num, _pos, "a number > 0"),
    },
    "downlink": {
        "mode": ((str,), _one_of("full", "quantised"), "'full' or 'quantised'"),
        "levels": (_int, _pos, "an integer >= 1"),
        "refresh_period": (_int, _pos, "an integer >= 1"),
    },
    "pretrain": {
        "enabled": ((bool,), None, "true or false"),
        "epochs": (_int, _nonneg, "an integer >= 0"),
        "fraction": (_num, _frac, "a number in (0, 1)"),
        "learning_rate": (_num, _pos, "a number > 0"),
        "batch_size": (_int, _pos, "an integer >= 1"),
    },
    "local": {
        "epochs": (_int, _pos, "an integer >= 1"),
        "learning_rate": (_num, _nonneg, "a number >= 0"),
        "batch_size": (_int, _pos, "an integer >= 1"),
    },
    "cost": {
        "methods": ((list,), _method_list, "a list of baseline/none/bu/bq/qsgd"),
        "levels": ((list,), _int_list, "a non-empty list of positive integers"),
    },
    "sweep": {
        "alpha": ((list,), _alpha_list, "a non-empty list of numbers > 0 or 'iid'"),
        "levels": ((list,), _int_list, "a non-empty list of positive integers"),
        "seeds": ((list,), _seed_list, "a non-empty list of integers >= 0"),
        "quantisers": ((list,), _quant_list, f"a non-empty list from {', '.join(QUANTISERS)}"),
    },
    "output": {
        "dir": ((str,), None, "a path"),
    },
}

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "seed": 0,
    "dataset": {"kind": "synthetic", "per_class": 500, "test_per_class": 250,
                "feature_dim": 20, "spread": 0.4, "separation": 1.0},
    "model": {"hidden": [32]},
    "partition": {"kind": "iid"},
    "federation": {"total_clients": 20, "sampled_per_round": 5, "rounds": 30,
                   "weighted": False, "workers": 1},
    "quantiser": {"kind": "bu", "levels": 64, "refresh_period": 10, "boundary_bits": 16,
                  "codebook_scope": "layer", "margin": 1.0},
    "downlink": {"mode": "full", "levels": 64, "refresh_period": 10},
    "pretrain": {"enabled": True, "epochs": 5, "fraction": 0.5},
    "local": {"epochs": 2, "learning_rate": 0.05, "batch_size": 10},
    "cost": {"methods": ["baseline", "bu", "bq", "qsgd"], "levels": [64, 128]},
    "sweep": {},
    "output": {"dir": "runs"},
}


# --------------------------------------------------------------------------- loading

class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e6``-style floats (YAML 1.1 wants a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                  |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                  |\.[0-9_]+(?:[eE][-+][0-9]+)?
                  |[-+]?\.(?:inf|Inf|INF)
                  |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))

class _Lines(dict):
    """Maps dotted key paths to 1-based source lines."""


def _collect_lines(node, prefix: str, out: _Lines) -> None:
    if isinstance(node, yaml.MappingNode):
        for knode, vnode in node.value:
            key = f"{prefix}.{knode.value}" if prefix else str(knode.value)
            out[key] = knode.start_mark.line + 1
            _collect_lines(vnode, key, out)


def parse_text(text: str, source: str = "<config>") -> tuple[dict, _Lines]:
    try:
        node = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None, source=source) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1, source=source)
    lines = _Lines()
    if node is not None:
        _collect_lines(node, "", lines)
    return data, lines


def validate(data: dict, lines: dict | None = None, source: str = "<config>") -> None:
    lines = lines or {}

    def fail(path, msg):
        raise ConfigError(msg, field=path, line=lines.get(path), source=source)

    def walk(d, schema, prefix):
        for key, value in d.items():
            path = f"{prefix}.{key}" if prefix else str(key)
            if key not in schema:
                fail(path, "unknown key")
            rule = schema[key]
            if isinstance(rule, dict):
                if not isinstance(value, dict):
                    fail(path, "must be a mapping")
                walk(value, rule, path)
                continue
            types, check, desc = rule
            bad_type = not isinstance(value, types) or (isinstance(value, bool) and bool not in types)
            if bad_type or (check is not None and not check(value)):
                fail(path, f"must be {desc}, got {value!r}")

    walk(data, SCHEMA, "")


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("fedbucket.presets").joinpath(f"{name}.yaml").read_text()
    data, lines = parse_text(text, f"preset:{name}")
    validate(data, lines, f"preset:{name}")
    return data


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, preset: str | None = None) -> "ExperimentConfig":
    """Resolve defaults <- preset <- file into a validated config."""
    data: dict = {}
    lines: dict = {}
    source = "<config>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", source=source) from None
        data, lines = parse_text(text, source)
        validate(data, lines, source)
    name = preset or data.get("preset")
    resolved = merge(DEFAULTS, load_preset(name)) if name else copy.deepcopy(DEFAULTS)
    resolved = merge(resolved, data)
    resolved.pop("preset", None)
    return ExperimentConfig.from_dict(resolved, lines, source)


# --------------------------------------------------------------------------- typed view

@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    name: str
    seed: int
    round: RoundConfig
    model_hidden: tuple[int, ...]
    model_widths: tuple[int, ...] | None
    layer_dims: tuple[int, ...] | None
    alpha: float | None
    dataset: dict
    cost_methods: tuple[str, ...]
    cost_levels: tuple[int, ...]
    sweep: dict
    out_dir: str

    @classmethod
    def from_dict(cls, d: dict, lines: dict | None = None, source: str = "<config>") -> "ExperimentConfig":
        lines = lines or {}

        def fail(path, msg):
            raise ConfigError(msg, field=path, line=lines.get(path), source=source)

        ds = d["dataset"]
        if ds["kind"] == "idx":
            for key in ("train_images", "train_labels"):
                if key not in ds:
                    fail(f"dataset.{key}", "required when dataset.kind is 'idx'")
        part = d["partition"]
        alpha = None
        if part["kind"] == "dirichlet":
            if "alpha" not in part:
                fail("partition.alpha", "required for a dirichlet partition")
            alpha = float(part["alpha"])
        fed, q, down, pre, loc = (d["federation"], d["quantiser"], d["downlink"],
                                  d["pretrain"], d["local"])
        if fed["sampled_per_round"] > fed["total_clients"]:
            fail("federation.sampled_per_round", "must not exceed federation.total_clients")
        pretrain = None
        if pre.get("enabled", True):
            pretrain = PretrainConfig(pre.get("epochs", 5), float(pre.get("fraction", 0.5)),
                                      pre.get("learning_rate"), pre.get("batch_size"))
        try:
            rc = RoundConfig(
                total_clients=fed["total_clients"], sampled_per_round=fed["sampled_per_round"],
                rounds=fed["rounds"], quantiser=q["kind"], levels=q["levels"],
                refresh_period=q["refresh_period"], boundary_bits=q["boundary_bits"],
                codebook_scope=q["codebook_scope"], margin=float(q["margin"]),
                downlink_levels=down["levels"] if down["mode"] == "quantised" else None,
                downlink_refresh_period=down["refresh_period"], pretrain=pretrain,
                local=LocalTrainConfig(loc["epochs"], float(loc["learning_rate"]), loc["batch_size"]),
                weighted=fed["weighted"], workers=fed["workers"], seed=d["seed"])
        except FedBucketError as exc:
            raise ConfigError(str(exc), source=source) from None
        model = d["model"]
        return cls(
            raw=d, name=d["name"], seed=d["seed"], round=rc,
            model_hidden=tuple(model.get("hidden", [])),
            model_widths=tuple(model["widths"]) if "widths" in model else None,
            layer_dims=tuple(model["layer_dims"]) if "layer_dims" in model else None,
            alpha=alpha, dataset=ds,
            cost_methods=tuple(d["cost"]["methods"]), cost_levels=tuple(d["cost"]["levels"]),
            sweep=d.get("sweep", {}), out_dir=d["output"]["dir"])

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Re-resolve after patching raw sections, e.g. ``seed=3`` or ``quantiser={'levels': 16}``."""
        return ExperimentConfig.from_dict(merge(self.raw, changes))

    def model_spec(self, input_dim: int | None = None, classes: int | None = None) -> ModelSpec:
        if self.model_widths is not None:
            return ModelSpec.mlp(self.model_widths)
        if input_dim is None or classes is None:
            raise ConfigError("model.widths is required when no dataset dimensions are known",
                              field="model.widths")
        return ModelSpec.mlp((input_dim,) + self.model_hidden + (classes,))

    def cost_dims(self) -> tuple[int, ...]:
        if self.layer_dims is not None:
            return self.layer_dims
        if self.model_widths is not None:
            return ModelSpec.mlp(self.model_widths).layer_dims
        ds = self.dataset
        if ds["kind"] != "synthetic":
            raise ConfigError("cost needs model.widths or model.layer_dims for idx datasets",
                              field="model.widths")
        return self.model_spec(ds["feature_dim"], ds["classes"]).layer_dims
