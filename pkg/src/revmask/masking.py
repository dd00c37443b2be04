"""Mask samplers, the ReverseMask layer and the comparison regularizers.

A ReverseMask call splits a feature map ``x`` into two perturbed copies with a
binary mask ``M`` and its complement::

    masked_out = alpha * (x * M) + beta * (x * (1 - M))
    paired_out = (1 - alpha) * (x * M) + (1 - beta) * (x * (1 - M))

so that ``masked_out + paired_out == x``. Bit 0 in ``M`` marks the region
perturbed away from the primary copy.

All randomness comes from an explicit ``numpy.random.Generator`` that the
caller passes in; each function advances it in a fixed order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, mul


class Sampler(str, enum.Enum):
    IID_UNIT = "iid"
    BAND = "band"
    FIXED_BIPARTITION = "bipartition"


class Policy(str, enum.Enum):
    DROPPING = "dropping"
    SCALING = "scaling"
    FIXED = "fixed"


class InferenceMode(str, enum.Enum):
    # scaling -> Fixed(0.5, 0.5); dropping -> bipartition mask with (1, 0)
    DETERMINISTIC = "deterministic"
    IDENTITY = "identity"


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be a 2-D matrix, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ScalePair:
    alpha: float
    beta: float
    policy: Policy = Policy.FIXED


@dataclass(frozen=True)
class RegConfig:
    prob: float = 1.0
    mask_ratio: float = 0.5
    sampler: Sampler = Sampler.BAND
    # (batch, frames, channels); per-channel masks are not supported
    share_over: tuple[bool, bool, bool] = (True, True, True)
    seed: int = 0
    inference_mode: InferenceMode = InferenceMode.DETERMINISTIC
    fixed_scales: tuple[float, float] = field(default=(0.5, 0.5))

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"reg prob must lie in [0, 1], got {self.prob}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie strictly inside (0, 1), got {self.mask_ratio}")
        object.__setattr__(self, "sampler", Sampler(self.sampler))
        object.__setattr__(self, "inference_mode", InferenceMode(self.inference_mode))
        if not self.share_over[2]:
            raise ValueError("masks are always shared across channels")


@dataclass
class PairedFeatures:
    masked_out: Tensor
    paired_out: Tensor


def sample_mask(cfg: RegConfig, h: int, w: int, rng: np.random.Generator) -> Mask:
    if h < 1 or w < 1:
        raise ValueError(f"mask dims must be positive, got {h}x{w}")
    if cfg.sampler is Sampler.IID_UNIT:
        bits = (rng.random((h, w)) >= cfg.mask_ratio).astype(np.uint8)
    elif cfg.sampler is Sampler.BAND:
        band = int(round(cfg.mask_ratio * h))
        if not 1 <= band <= h - 1:
            raise ValueError(f"degenerate band: round({cfg.mask_ratio} * {h}) = {band} rows")
        top = int(rng.integers(0, h - band + 1))
        bits = np.ones((h, w), dtype=np.uint8)
        bits[top : top + band] = 0
    else:
        bits = bipartition_mask(h, w).bits
    return Mask(bits)


def bipartition_mask(h: int, w: int) -> Mask:
    """Top ceil(h/2) rows kept, bottom rows zeroed."""
    bits = np.zeros((h, w), dtype=np.uint8)
    bits[: math.ceil(h / 2)] = 1
    return Mask(bits)


def sample_mask_field(cfg: RegConfig, b: int, n: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Mask bits broadcastable to (b, n, c, h, w), honouring ``share_over``."""
    nb = 1 if cfg.share_over[0] else b
    nn = 1 if cfg.share_over[1] else n
    field_ = np.empty((nb, nn, 1, h, w), dtype=np.uint8)
    for i in range(nb):
        for j in range(nn):
            field_[i, j, 0] = sample_mask(cfg, h, w, rng).bits
    return field_


def reverse_mask(m: Mask) -> Mask:
    return Mask(1 - m.bits)


def sample_scale_pair(policy: Policy | ScalePair, rng: np.random.Generator) -> ScalePair:
    """Draw (alpha, beta) for one forward call.

    ``policy`` is either a :class:`Policy` (DROPPING or SCALING) or a fixed
    :class:`ScalePair` that is echoed after a range check.
    """
    if isinstance(policy, ScalePair):
        if not (0.0 <= policy.alpha <= 1.0 and 0.0 <= policy.beta <= 1.0):
            raise ValueError(f"fixed scales must lie in [0, 1], got ({policy.alpha}, {policy.beta})")
        return ScalePair(policy.alpha, policy.beta, Policy.FIXED)
    policy = Policy(policy)
    if policy is Policy.DROPPING:
        return ScalePair(1.0, 0.0, Policy.DROPPING)
    if policy is Policy.SCALING:
        alpha, beta = rng.random(2)
        return ScalePair(float(alpha), float(beta), Policy.SCALING)
    raise ValueError("Policy.FIXED needs explicit values; pass a ScalePair instead")


def _mask_bits(x: Tensor, m) -> np.ndarray:
    bits = m.bits if isinstance(m, Mask) else np.asarray(m)
    if bits.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"mask dims {bits.shape[-2:]} do not match feature map {x.shape[-2:]}")
    return bits.astype(x.dtype)


def split_by_mask(x: Tensor, m) -> tuple[Tensor, Tensor]:
    """The two complementary masked features (x * M, x * (1 - M))."""
    bits = _mask_bits(x, m)
    return mul(x, bits), mul(x, 1 - bits)


def apply_reverse_mask(x: Tensor, m, sp: ScalePair) -> PairedFeatures:
    """Split ``x`` into the scaled pair; ``m`` is a Mask or a broadcastable bit field."""
    bits = _mask_bits(x, m)
    one = x.dtype.type(1)
    a, b = x.dtype.type(sp.alpha), x.dtype.type(sp.beta)
    # coefficients are built from binary bits, so for (1, 0) they equal M bitwise
    masked_coef = a * bits + b * (one - bits)
    paired_coef = (one - a) * bits + (one - b) * (one - bits)
    return PairedFeatures(mul(x, masked_coef), mul(x, paired_coef))


def identity_split(x: Tensor) -> PairedFeatures:
    return PairedFeatures(x, Tensor(np.zeros(x.shape, dtype=x.dtype)))


def maybe_regularize(
    x: Tensor, cfg: RegConfig, policy: Policy | ScalePair, rng: np.random.Generator
) -> PairedFeatures:
    """Apply ReverseMask with probability ``cfg.prob`` (one draw per call)."""
    fire = rng.random() < cfg.prob
    if not fire:
        return identity_split(x)
    b, n, _, h, w = x.shape
    bits = sample_mask_field(cfg, b, n, h, w, rng)
    sp = sample_scale_pair(policy, rng)
    return apply_reverse_mask(x, bits, sp)


def inference_split(x: Tensor, cfg: RegConfig, policy: Policy | ScalePair) -> PairedFeatures:
    """Deterministic eval-mode counterpart of :func:`maybe_regularize`."""
    if cfg.inference_mode is InferenceMode.IDENTITY:
        return identity_split(x)
    h, w = x.shape[-2:]
    if isinstance(policy, ScalePair):
        return apply_reverse_mask(x, bipartition_mask(h, w), policy)
    if Policy(policy) is Policy.DROPPING:
        return apply_reverse_mask(x, bipartition_mask(h, w), ScalePair(1.0, 0.0, Policy.DROPPING))
    alpha, beta = cfg.fixed_scales
    return apply_reverse_mask(x, bipartition_mask(h, w), ScalePair(alpha, beta))


# ---------------------------------------------------------------- baselines


def dropblock_apply(x: Tensor, cfg: RegConfig, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Zero the masked-away region (no pairing, no rescaling).

    In eval mode the output is scaled by the expected keep fraction instead.
    """
    if not train:
        return mul(x, 1.0 - cfg.prob * cfg.mask_ratio)
    if not rng.random() < cfg.prob:
        return x
    b, n, _, h, w = x.shape
    bits = sample_mask_field(cfg, b, n, h, w, rng)
    return mul(x, bits.astype(x.dtype))


def scaling_dropblock_apply(x: Tensor, cfg: RegConfig, rng: np.random.Generator, train: bool = True) -> Tensor:
    """alpha * (x * M) + beta * (x * (1 - M)) with fresh U(0, 1) scales; the pair is discarded.

    In eval mode the output is scaled by the expected factor instead.
    """
    if not train:
        return mul(x, 1.0 - cfg.prob * 0.5)
    if not rng.random() < cfg.prob:
        return x
    b, n, _, h, w = x.shape
    bits = sample_mask_field(cfg, b, n, h, w, rng)
    sp = sample_scale_pair(Policy.SCALING, rng)
    return apply_reverse_mask(x, bits, sp).masked_out


def random_erase_input(
    frames: np.ndarray,
    erase_prob: float,
    rng: np.random.Generator,
    area: tuple[float, float] = (0.02, 0.2),
    aspect: tuple[float, float] = (0.3, 3.3),
    attempts: int = 100,
) -> np.ndarray:
    """Zero one random rectangle at the same place in every frame of a sequence.

    ``frames`` is (n, h, w) or a single (h, w) frame. Returns a new array.
    """
    out = np.array(frames, copy=True)
    if not rng.random() < erase_prob:
        return out
    h, w = out.shape[-2:]
    for _ in range(attempts):
        target = rng.uniform(*area) * h * w
        ratio = rng.uniform(*aspect)
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out[..., top : top + eh, left : left + ew] = 0
            return out
    return out
