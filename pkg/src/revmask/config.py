"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys and malformed values are rejected with the offending line
number. Any key can be overridden from the environment: ``train.lr`` is read
from ``REVMASK_TRAIN__LR`` (prefix ``REVMASK_``, upper case, ``.`` -> ``__``).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .blocks import BRANCHES, Fusion
from .masking import InferenceMode, RegConfig, Sampler
from .model import BatchSpec, LRSchedule, ModelConfig, Optimizer, StageKind, TripletConfig

ENV_PREFIX = "REVMASK_"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# ---------------------------------------------------------------- value codecs


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _pairs(s: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        a, b = part.lower().split("x")
        out.append((int(a), int(b)))
    return tuple(out)


def _milestones(s: str) -> tuple[tuple[int, float], ...]:
    out = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        it, lr = part.split(":")
        out.append((int(it), float(lr)))
    return tuple(sorted(out))


def _names(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip().lower()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {s!r}")
        return s

    return parse


def _prob(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"expected a value in [0, 1], got {v}")
    return v


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {v}")
    return v


def _fmt_float(v: float) -> str:
    return repr(float(v))


_FORMAT: dict[Callable, Callable[[Any], str]] = {
    _bool: lambda v: "true" if v else "false",
    _ints: lambda v: ",".join(str(x) for x in v),
    _pairs: lambda v: ",".join(f"{a}x{b}" for a, b in v),
    _milestones: lambda v: ",".join(f"{i}:{_fmt_float(lr)}" for i, lr in v),
    _names: lambda v: ",".join(v),
    float: _fmt_float,
    _prob: _fmt_float,
}


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: str
    doc: str

    def format(self, value) -> str:
        return _FORMAT.get(self.parse, str)(value)


BLOCKS = tuple(k.value for k in StageKind)

SCHEMA: tuple[Key, ...] = (
    Key("model.widths", _ints, "16,32,64", "output channels of each conv stage"),
    Key("model.strips", _positive_int, "16", "horizontal strips per branch in the head"),
    Key("model.embed_dim", _positive_int, "64", "embedding size per strip"),
    Key("model.gem_power", float, "6.5", "generalized-mean pooling power"),
    Key("model.pools", _pairs, "2x2,2x2", "spatial max pooling (h x w) after every stage but the last"),
    Key("model.negative_slope", float, "0.01", "Leaky ReLU slope"),
    Key("model.double_channels", _bool, "false", "double every stage width"),
    Key("block.variant", _choice(*BLOCKS), "inception", "block used by stages 2.. (conv = no regularizer)"),
    Key("block.fusion", _choice(*(f.value for f in Fusion)), "concat", "Inception fusion at the final stage; earlier stages always sum"),
    Key("block.branches", _names, ",".join(BRANCHES), "enabled Inception branches"),
    Key("reg.prob", _prob, "1.0", "probability that a forward call applies the perturbation"),
    Key("reg.mask_ratio", float, "0.5", "expected fraction of the map perturbed away from the primary copy"),
    Key("reg.sampler", _choice(*(s.value for s in Sampler)), "band", "mask sampler"),
    Key("reg.seed", int, "0", "seed of the mask/scale stream (mixed with the run seed)"),
    Key("reg.inference_mode", _choice(*(m.value for m in InferenceMode)), "deterministic", "eval-time behaviour of ReverseMask layers"),
    Key("train.p", _positive_int, "8", "subjects per batch"),
    Key("train.k", _positive_int, "16", "sequences per subject in a batch"),
    Key("train.margin", float, "0.2", "triplet margin"),
    Key("train.lr", float, "0.0001", "initial learning rate"),
    Key("train.weight_decay", float, "0.0005", "L2 weight decay added to the gradient"),
    Key("train.milestones", _milestones, "70000:1e-05", "iter:lr pairs; lr applies after that iteration"),
    Key("train.iters", _positive_int, "80000", "training iterations"),
    Key("train.frames", _positive_int, "30", "frames per training sample"),
    Key("train.checkpoint_every", int, "10000", "checkpoint interval in iterations (0 = final only)"),
    Key("train.random_erasing", _prob, "0.0", "probability of erasing one rectangle per input sequence"),
    Key("data.kind", _choice("synth", "casia-b", "oumvlp"), "synth", "dataset layout"),
    Key("data.split", _choice("st", "mt", "lt", "synth", "oumvlp"), "synth", "train/test partition"),
    Key("data.synth_train_ids", _positive_int, "10", "leading synthetic subjects used for training"),
    Key("data.cache_dir", str, "", "sequence cache for raw layouts (empty = no cache)"),
    Key("eval.batch", _positive_int, "4", "sequences per eval forward pass"),
    Key("eval.exclude_invalid", _bool, "false", "skip probes whose subject is missing from a gallery view"),
)

KEYS: dict[str, Key] = {k.name: k for k in SCHEMA}

PRESETS: dict[str, dict[str, str]] = {
    # CPU scale: 20 synthetic walkers, a short run with aggressive pooling
    "desk": {
        "model.pools": "4x4,1x2",
        "train.p": "4",
        "train.k": "4",
        "train.lr": "0.001",
        "train.milestones": "1500:0.0001",
        "train.iters": "2000",
        "train.frames": "8",
        "train.checkpoint_every": "0",
        "data.synth_train_ids": "10",
    },
    # 64 strips x 64 dims per branch; no height pooling so 64 rows remain
    "paper": {"model.strips": "64", "model.widths": "32,64,128", "model.pools": "1x2,1x2"},
}


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "__")


def _coerce(key: str, raw: str, line: int | None, source: str):
    spec = KEYS.get(key)
    if spec is None:
        raise ConfigError(f"unknown key {key!r}", line, source)
    try:
        return spec.parse(raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}", line, source) from None


class RunConfig:
    """Typed, validated values for every schema key."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = {k.name: k.parse(k.default) for k in SCHEMA}
        for key, val in (values or {}).items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = val
        self._values = merged
        self._check()

    def _check(self) -> None:
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def __getitem__(self, key: str):
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def items(self):
        return self._values.items()

    @classmethod
    def parse(cls, text: str, source: str = "<config>", env: Mapping[str, str] | None = None) -> "RunConfig":
        values: dict[str, Any] = {}
        for no, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", no, source)
            key, _, raw = line.partition("=")
            key = key.strip()
            if key in values:
                raise ConfigError(f"duplicate key {key!r}", no, source)
            values[key] = _coerce(key, raw, no, source)
        for key in KEYS:
            name = env_name(key)
            if env is not None and name in env:
                values[key] = _coerce(key, env[name], None, f"${name}")
        try:
            return cls(values)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], None, source) from None

    @classmethod
    def load(cls, path: str | Path, env: Mapping[str, str] | None = None) -> "RunConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        return cls.parse(text, str(path), os.environ if env is None else env)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        return cls({k: KEYS[k].parse(v) for k, v in PRESETS[name].items()})

    def with_values(self, updates: Mapping[str, Any]) -> "RunConfig":
        merged = dict(self._values)
        for key, val in updates.items():
            merged[key] = _coerce(key, val, None, "<override>") if isinstance(val, str) else val
        return RunConfig(merged)

    def emit(self, docs: bool = False) -> str:
        lines = []
        for k in SCHEMA:
            if docs:
                lines.append(f"# {k.doc} (default {k.default})")
            lines.append(f"{k.name} = {k.format(self._values[k.name])}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.emit().encode("utf-8")).hexdigest()[:16]

    # ------------------------------------------------------------ builders

    def reg_config(self, seed: int = 0) -> RegConfig:
        return RegConfig(
            prob=self["reg.prob"],
            mask_ratio=self["reg.mask_ratio"],
            sampler=Sampler(self["reg.sampler"]),
            seed=self["reg.seed"] + seed,
            inference_mode=InferenceMode(self["reg.inference_mode"]),
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            widths=self["model.widths"],
            strips=self["model.strips"],
            embed_dim=self["model.embed_dim"],
            gem_power=self["model.gem_power"],
            block=StageKind(self["block.variant"]),
            final_fusion=Fusion(self["block.fusion"]),
            branches=self["block.branches"],
            pools=self["model.pools"],
            negative_slope=self["model.negative_slope"],
            frames_per_sample=self["train.frames"],
            double_channels=self["model.double_channels"],
            reg=self.reg_config(),
        )

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self["train.p"], self["train.k"])

    def triplet(self) -> TripletConfig:
        return TripletConfig(self["train.margin"])

    def optimizer(self) -> Optimizer:
        return Optimizer(LRSchedule(self["train.lr"], self["train.milestones"]), self["train.weight_decay"])


def documented_defaults() -> str:
    return RunConfig().emit(docs=True)
