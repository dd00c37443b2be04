"""ReverseMask feature extraction and the Plain / Inception-like blocks."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masking import (
    PairedFeatures,
    Policy,
    RegConfig,
    ScalePair,
    identity_split,
    inference_split,
    maybe_regularize,
)
from .tensor import Tensor


class Variant(str, enum.Enum):
    PLAIN_DROPPING = "plain_dropping"
    PLAIN_SCALING = "plain_scaling"
    INCEPTION = "inception"


class Fusion(str, enum.Enum):
    SUM = "sum"
    CONCAT_HEIGHT = "concat"


BRANCHES = ("global", "dropping", "scaling")


class BlockConfigError(ValueError):
    pass


@dataclass
class ConvParams:
    """One 3D convolution followed by Leaky ReLU.

    For an RMFE branch the same weights are applied to both halves of the
    paired features, which is why a branch owns exactly one of these.
    """

    weight: Tensor
    bias: Tensor | None
    negative_slope: float = 0.01
    padding: tuple[int, int, int] = (1, 1, 1)

    def conv(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, padding=self.padding)

    def tensors(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


RMFEParams = ConvParams


def init_conv(
    c_in: int,
    c_out: int,
    rng: np.random.Generator,
    kernel=(3, 3, 3),
    negative_slope: float = 0.01,
    dtype=T.DEFAULT_DTYPE,
    bias: bool = True,
) -> ConvParams:
    """Kaiming-uniform style init for a Leaky ReLU conv."""
    kt, kh, kw = kernel
    fan_in = c_in * kt * kh * kw
    gain = np.sqrt(2.0 / (1 + negative_slope**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, kt, kh, kw)).astype(dtype)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(
        Tensor(w, requires_grad=True),
        b,
        negative_slope,
        padding=(kt // 2, kh // 2, kw // 2),
    )


@dataclass(frozen=True)
class BlockConfig:
    c_in: int
    c_out: int
    variant: Variant = Variant.INCEPTION
    fusion: Fusion = Fusion.SUM
    reg: RegConfig = field(default_factory=RegConfig)
    branches: tuple[str, ...] = BRANCHES

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "fusion", Fusion(self.fusion))
        unknown = set(self.branches) - set(BRANCHES)
        if unknown or not self.branches:
            raise BlockConfigError(f"invalid branch selection {self.branches!r}")


def rmfe_forward(pf: PairedFeatures, params: ConvParams, activation: bool = True) -> Tensor:
    """F = act(W * masked_out) + act(W * paired_out) with one shared W."""
    if pf.masked_out.shape != pf.paired_out.shape:
        raise T.ShapeError("paired", f"halves differ: {pf.masked_out.shape} vs {pf.paired_out.shape}")
    a = params.conv(pf.masked_out)
    b = params.conv(pf.paired_out)
    if activation:
        a = T.leaky_relu(a, params.negative_slope)
        b = T.leaky_relu(b, params.negative_slope)
    return a + b


def conv_forward(x: Tensor, params: ConvParams) -> Tensor:
    return T.leaky_relu(params.conv(x), params.negative_slope)


def _policy_for(variant: Variant) -> Policy:
    return Policy.SCALING if variant is Variant.PLAIN_SCALING else Policy.DROPPING


def _split(x: Tensor, reg: RegConfig, policy: Policy | ScalePair, rng, train: bool) -> PairedFeatures:
    if train:
        return maybe_regularize(x, reg, policy, rng)
    return inference_split(x, reg, policy)


def plain_rmb_forward(
    x: Tensor,
    cfg: BlockConfig,
    params: ConvParams,
    rng: np.random.Generator | None,
    train: bool = True,
    policy: Policy | ScalePair | None = None,
) -> Tensor:
    """ReverseMask (dropping or scaling) followed by RMFE.

    ``policy`` overrides the variant's policy, e.g. with a fixed ScalePair.
    """
    if cfg.variant is Variant.INCEPTION:
        raise BlockConfigError("plain_rmb_forward needs a Plain variant")
    policy = _policy_for(cfg.variant) if policy is None else policy
    return rmfe_forward(_split(x, cfg.reg, policy, rng, train), params)


def _substreams(rng: np.random.Generator | None, k: int) -> list[np.random.Generator | None]:
    if rng is None:
        return [None] * k
    seeds = rng.integers(0, 2**63, size=k)
    return [np.random.default_rng(int(s)) for s in seeds]


def inception_branches(
    x: Tensor,
    cfg: BlockConfig,
    global_params: ConvParams,
    dropping_params: ConvParams,
    scaling_params: ConvParams,
    rng: np.random.Generator | None,
    train: bool = True,
    policies: tuple[Policy | ScalePair, Policy | ScalePair] = (Policy.DROPPING, Policy.SCALING),
) -> dict[str, Tensor]:
    """Evaluate the enabled branches; disabled ones are skipped entirely."""
    # substreams are drawn even for disabled branches so ablations see the same masks
    rng_d, rng_s = _substreams(rng, 2)
    out: dict[str, Tensor] = {}
    if "global" in cfg.branches:
        out["global"] = conv_forward(x, global_params)
    if "dropping" in cfg.branches:
        out["dropping"] = rmfe_forward(_split(x, cfg.reg, policies[0], rng_d, train), dropping_params)
    if "scaling" in cfg.branches:
        out["scaling"] = rmfe_forward(_split(x, cfg.reg, policies[1], rng_s, train), scaling_params)
    return out


def inception_rmb_forward(
    x: Tensor,
    cfg: BlockConfig,
    global_params: ConvParams,
    dropping_params: ConvParams,
    scaling_params: ConvParams,
    rng: np.random.Generator | None,
    train: bool = True,
    final_stage: bool = False,
    policies: tuple[Policy | ScalePair, Policy | ScalePair] = (Policy.DROPPING, Policy.SCALING),
) -> Tensor:
    if cfg.variant is not Variant.INCEPTION:
        raise BlockConfigError("inception_rmb_forward needs the Inception variant")
    if cfg.fusion is Fusion.CONCAT_HEIGHT and not final_stage:
        raise BlockConfigError("height concatenation is only allowed at the final stage")
    feats = inception_branches(x, cfg, global_params, dropping_params, scaling_params, rng, train, policies)
    ordered = [feats[name] for name in BRANCHES if name in feats]
    if cfg.fusion is Fusion.CONCAT_HEIGHT:
        return T.concat(ordered, axis=3)
    total = ordered[0]
    for f in ordered[1:]:
        total = total + f
    return total


def final_stage_concat(global_: Tensor, dropping: Tensor, scaling: Tensor) -> Tensor:
    """Stack branch maps along height in (global, dropping, scaling) order."""
    if not global_.shape == dropping.shape == scaling.shape:
        raise T.ShapeError("branches", f"shapes differ: {global_.shape}, {dropping.shape}, {scaling.shape}")
    return T.concat([global_, dropping, scaling], axis=3)


__all__ = [
    "BRANCHES",
    "BlockConfig",
    "BlockConfigError",
    "ConvParams",
    "Fusion",
    "RMFEParams",
    "Variant",
    "conv_forward",
    "final_stage_concat",
    "identity_split",
    "inception_branches",
    "inception_rmb_forward",
    "init_conv",
    "plain_rmb_forward",
    "rmfe_forward",
]
