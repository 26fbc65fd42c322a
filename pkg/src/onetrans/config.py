"""Run configuration: one YAML/JSON file, dotted CLI overrides, strict keys.

Schema (every section optional)::

    seed: 0
    model:            # preset + ModelConfig overrides
      preset: tiny    # tiny | small
      n_layers: 2
      tokenizer: {fusion: ts_aware, ...}
    data:
      preset: planted # planted | deep_signal
      synthetic: {n_requests: 5000, ...}      # SynthConfig overrides
    train: {batch_size: 32, dense_lr: 0.0006, ...}   # TrainConfig
    bench:
      ablation: {axes: [...], budget_steps: 0}
      scaling: {axis: length, grid: [16, 32, 64], seeds: [0]}
      perf: {toggles: [pyramid, cache], candidates: 32, requests: 8, reps: 5}
    verify: {seeds: 100, tolerance: 1.0e-5}
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .bench import ABLATION_AXES
from .features import SynthConfig, deep_signal_config
from .model import ConfigError, ModelConfig, small_config, tiny_config
from .train import TrainConfig, desk_train_config

PRESETS = {"tiny": tiny_config, "small": small_config}
DATA_PRESETS = {"planted": SynthConfig, "deep_signal": deep_signal_config}

_BENCH_DEFAULTS = {
    "ablation": {"axes": list(ABLATION_AXES), "budget_steps": 0},
    "scaling": {"axis": "length", "grid": [16, 32, 64], "seeds": [0]},
    "perf": {"toggles": ["pyramid", "cache"], "candidates": 32, "requests": 8, "reps": 5},
}
_VERIFY_DEFAULTS = {"seeds": 100, "tolerance": 1e-5}
_TOP = {"seed", "model", "data", "train", "bench", "verify"}


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=lambda: {"preset": "tiny"})
    data: dict = field(default_factory=lambda: {"preset": "planted", "synthetic": {}})
    train: dict = field(default_factory=lambda: desk_train_config().to_dict())
    bench: dict = field(default_factory=lambda: copy.deepcopy(_BENCH_DEFAULTS))
    verify: dict = field(default_factory=lambda: dict(_VERIFY_DEFAULTS))

    # -- resolved views -------------------------------------------------
    def model_config(self):
        m = dict(self.model)
        preset = m.pop("preset", "tiny")
        if preset not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}")
        base = PRESETS[preset]().to_dict()
        _check_keys("model", m, base)
        if "tokenizer" in m:
            _check_keys("model.tokenizer", m["tokenizer"], base["tokenizer"])
        return ModelConfig.from_dict(_merge(base, m))

    def synth_config(self):
        preset = self.data.get("preset", "planted")
        if preset not in DATA_PRESETS:
            raise ConfigError(f"data.preset must be one of {sorted(DATA_PRESETS)}")
        over = self.data.get("synthetic", {}) or {}
        _check_keys("data.synthetic", over, SynthConfig.__dataclass_fields__)
        try:
            return DATA_PRESETS[preset](**over).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc

    def train_config(self):
        return TrainConfig.from_dict(self.train)

    def validate(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        _check_keys("data", self.data, {"preset", "synthetic"})
        _check_keys("bench", self.bench, _BENCH_DEFAULTS)
        for sec, vals in self.bench.items():
            _check_keys(f"bench.{sec}", vals, _BENCH_DEFAULTS[sec])
        bad = set(self.bench["ablation"]["axes"]) - set(ABLATION_AXES)
        if bad:
            raise ConfigError(f"unknown key(s) in bench.ablation.axes: {', '.join(sorted(bad))}")
        if self.bench["scaling"]["axis"] not in ("length", "depth", "width"):
            raise ConfigError("bench.scaling.axis must be length|depth|width")
        for t in self.bench["perf"]["toggles"]:
            if t not in ("pyramid", "cache"):
                raise ConfigError(f"unknown key(s) in bench.perf.toggles: {t}")
        _check_keys("verify", self.verify, _VERIFY_DEFAULTS)
        self.model_config()
        self.synth_config()
        self.train_config()
        return self

    def to_dict(self):
        return {"seed": self.seed, "model": self.model, "data": self.data, "train": self.train,
                "bench": self.bench, "verify": self.verify}

    def effective(self):
        """Fully resolved settings, as echoed next to every output."""
        return {"seed": self.seed, "model": self.model_config().to_dict(),
                "data": {"preset": self.data.get("preset", "planted"),
                         "synthetic": self.synth_config().to_dict()},
                "train": self.train_config().to_dict(), "bench": self.bench, "verify": self.verify}

    def dump_effective(self, directory, name="config.effective.yaml"):
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.effective(), sort_keys=True))
        return path


def from_dict(d):
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a mapping")
    _check_keys("config", d, _TOP)
    rc = RunConfig()
    if "seed" in d:
        rc.seed = d["seed"]
    if "model" in d:
        rc.model = dict(d["model"] or {})
    if "data" in d:
        rc.data = _merge(rc.data, d["data"] or {})
    if "train" in d:
        _check_keys("train", d["train"] or {}, TrainConfig.__dataclass_fields__)
        rc.train = _merge(rc.train, d["train"] or {})
    if "bench" in d:
        _check_keys("bench", d["bench"] or {}, _BENCH_DEFAULTS)
        rc.bench = _merge(rc.bench, d["bench"] or {})
    if "verify" in d:
        rc.verify = _merge(rc.verify, d["verify"] or {})
    return rc.validate()


def load(path=None, overrides=()):
    """Read ``path`` (YAML or JSON) and apply ``key.path=value`` overrides."""
    raw = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(value)
    return from_dict(raw)
