"""Baseline 3D-conv gait network, BA+ triplet loss, PK sampling and Adam."""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .blocks import (
    BRANCHES,
    BlockConfig,
    ConvParams,
    Fusion,
    Variant,
    conv_forward,
    inception_rmb_forward,
    init_conv,
    plain_rmb_forward,
)
from .masking import RegConfig, dropblock_apply, scaling_dropblock_apply
from .tensor import BatchNormState, Tensor


class StageKind(str, enum.Enum):
    CONV = "conv"
    DROPBLOCK = "dropblock"
    SCALING_DROPBLOCK = "scaling_dropblock"
    PLAIN_DROPPING = "plain_dropping"
    PLAIN_SCALING = "plain_scaling"
    INCEPTION = "inception"


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    strips: int = 16
    embed_dim: int = 64
    gem_power: float = 6.5
    gem_eps: float = 1e-6
    block: StageKind = StageKind.INCEPTION
    final_fusion: Fusion = Fusion.CONCAT_HEIGHT
    branches: tuple[str, ...] = BRANCHES
    kernel: tuple[int, int, int] = (3, 3, 3)
    # spatial (kh, kw) max pooling after every stage but the last
    pools: tuple[tuple[int, int], ...] = ((2, 2), (2, 2))
    negative_slope: float = 0.01
    frames_per_sample: int = 30
    double_channels: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    reg: RegConfig = field(default_factory=RegConfig)
    input_hw: tuple[int, int] = (64, 44)

    def __post_init__(self):
        object.__setattr__(self, "block", StageKind(self.block))
        object.__setattr__(self, "final_fusion", Fusion(self.final_fusion))
        if any(w < 1 for w in self.widths) or not self.widths:
            raise ValueError(f"stage widths must be >= 1, got {self.widths}")
        if len(self.pools) != len(self.widths) - 1:
            raise ValueError(f"need {len(self.widths) - 1} pooling entries, got {len(self.pools)}")
        h, w = self.final_map_hw
        if h % self.strips:
            raise ValueError(f"strips ({self.strips}) must divide the final feature height ({h})")
        if w < 1:
            raise ValueError("pooling leaves no columns")

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(2 * w for w in self.widths) if self.double_channels else self.widths

    @property
    def concat_final(self) -> bool:
        return self.block is StageKind.INCEPTION and self.final_fusion is Fusion.CONCAT_HEIGHT

    @property
    def stage_hw(self) -> tuple[int, int]:
        """Height/width seen by the last stage, before any concatenation."""
        h, w = self.input_hw
        for kh, kw in self.pools:
            h, w = h // kh, w // kw
        return h, w

    @property
    def final_map_hw(self) -> tuple[int, int]:
        h, w = self.stage_hw
        return (h * len(self.branches), w) if self.concat_final else (h, w)

    @property
    def head_strips(self) -> int:
        """Strip count of the embedding; concatenation multiplies it per branch."""
        return self.strips * len(self.branches) if self.concat_final else self.strips


class GaitModel:
    """Parameters, BN buffers and the forward pass of the baseline network.

    Stage 1 is a plain conv; later stages use ``cfg.block``. The last
    Inception stage concatenates its branches along height when
    ``cfg.final_fusion`` is ``concat``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = cfg.stage_widths
        self.stages: list[dict[str, ConvParams]] = []
        c_in = 1
        for i, c_out in enumerate(widths):
            kind = StageKind.CONV if i == 0 else cfg.block
            names = ("global", "dropping", "scaling") if kind is StageKind.INCEPTION else ("conv",)
            self.stages.append(
                {
                    name: init_conv(c_in, c_out, rng, cfg.kernel, cfg.negative_slope, dtype=self.dtype)
                    for name in names
                }
            )
            c_in = c_out
        s = cfg.head_strips
        bound = np.sqrt(6.0 / (c_in + cfg.embed_dim))
        self.fc = Tensor(
            rng.uniform(-bound, bound, size=(s, c_in, cfg.embed_dim)).astype(self.dtype), requires_grad=True
        )
        self.bn_gamma = Tensor(np.ones((s, cfg.embed_dim), dtype=self.dtype), requires_grad=True)
        self.bn_beta = Tensor(np.zeros((s, cfg.embed_dim), dtype=self.dtype), requires_grad=True)
        self.bn_state = BatchNormState((s, cfg.embed_dim), cfg.bn_momentum, cfg.bn_eps, dtype=self.dtype)

    # ------------------------------------------------------------ state

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for i, stage in enumerate(self.stages, start=1):
            for name, p in stage.items():
                for pname, t in p.tensors().items():
                    out[f"stage{i}.{name}.{pname}"] = t
        out["head.fc"] = self.fc
        out["head.bn.gamma"] = self.bn_gamma
        out["head.bn.beta"] = self.bn_beta
        return out

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            [("head.bn.running_mean", self.bn_state.running_mean), ("head.bn.running_var", self.bn_state.running_var)]
        )

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, t.data) for k, t in self.parameters().items())
        out.update(self.buffers())
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copy arrays into the model; raises KeyError/ShapeError naming the tensor."""
        params = self.parameters()
        for name, t in params.items():
            if name not in arrays:
                raise KeyError(name)
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise T.ShapeError(name, f"checkpoint has shape {arr.shape}, model expects {t.shape}")
            t.data = arr.astype(self.dtype).copy()
        for name in ("head.bn.running_mean", "head.bn.running_var"):
            if name not in arrays:
                raise KeyError(name)
            arr = np.asarray(arrays[name])
            if arr.shape != self.bn_state.running_mean.shape:
                raise T.ShapeError(name, f"checkpoint has shape {arr.shape}")
            if name.endswith("mean"):
                self.bn_state.running_mean = arr.astype(self.dtype).copy()
            else:
                self.bn_state.running_var = arr.astype(self.dtype).copy()
        extra = set(arrays) - set(params) - {"head.bn.running_mean", "head.bn.running_var"}
        if extra:
            raise KeyError(sorted(extra)[0])

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    # ------------------------------------------------------------ forward

    def _stage(self, i: int, x: Tensor, train: bool, rng, final: bool) -> Tensor:
        cfg = self.cfg
        params = self.stages[i]
        kind = StageKind.CONV if i == 0 else cfg.block
        reg = cfg.reg
        if kind is StageKind.CONV:
            return conv_forward(x, params["conv"])
        if kind is StageKind.DROPBLOCK:
            return conv_forward(dropblock_apply(x, reg, rng, train), params["conv"])
        if kind is StageKind.SCALING_DROPBLOCK:
            return conv_forward(scaling_dropblock_apply(x, reg, rng, train), params["conv"])
        c_in = x.shape[2]
        c_out = params[next(iter(params))].weight.shape[0]
        if kind in (StageKind.PLAIN_DROPPING, StageKind.PLAIN_SCALING):
            bc = BlockConfig(c_in, c_out, Variant(kind.value), Fusion.SUM, reg)
            return plain_rmb_forward(x, bc, params["conv"], rng, train)
        fusion = cfg.final_fusion if final else Fusion.SUM
        bc = BlockConfig(c_in, c_out, Variant.INCEPTION, fusion, reg, cfg.branches)
        return inception_rmb_forward(
            x, bc, params["global"], params["dropping"], params["scaling"], rng, train, final_stage=final
        )

    def backbone(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        """(b, n, 1, 64, 44) silhouettes -> (b, n, c_final, h_final, w_final)."""
        if x.ndim != 5:
            raise T.ShapeError("rank", f"expected (b, n, 1, h, w) input, got {x.shape}")
        if x.shape[2] != 1:
            raise T.ShapeError("channels", f"expected 1 input channel, got {x.shape[2]}")
        if x.shape[3:] != self.cfg.input_hw:
            raise T.ShapeError("height" if x.shape[3] != self.cfg.input_hw[0] else "width",
                               f"expected {self.cfg.input_hw} frames, got {x.shape[3:]}")
        if train and rng is None:
            raise ValueError("train mode needs an rng")
        n_stages = len(self.stages)
        stage_rngs = [None] * n_stages
        if rng is not None:
            stage_rngs = [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63, size=n_stages)]
        for i in range(n_stages):
            final = i == n_stages - 1
            kh, kw = (1, 1) if final else self.cfg.pools[i]
            pooled = kh > 1 or kw > 1
            if i == 0 and pooled:
                # max pooling commutes with the monotone activation; pooling first is cheaper
                conv = self.stages[0]["conv"]
                x = T.leaky_relu(T.max_pool_hw(conv.conv(x), kh, kw), conv.negative_slope)
                continue
            x = self._stage(i, x, train, stage_rngs[i], final)
            if pooled:
                x = T.max_pool_hw(x, kh, kw)
        return x

    def head(self, feats: Tensor, train: bool) -> tuple[Tensor, Tensor]:
        """Temporal max -> strip GeM -> per-strip FC -> BN. Returns (pre_bn, post_bn)."""
        pooled = T.temporal_max_pool(feats)
        strips = T.gem_pool_strip(pooled, self.cfg.head_strips, self.cfg.gem_power, self.cfg.gem_eps)
        pre = T.linear_map(strips, self.fc)
        post = T.batchnorm_1d(pre, self.bn_gamma, self.bn_beta, self.bn_state, train)
        return pre, post

    def forward(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        return self.head(self.backbone(x, train, rng), train)

    def embed(self, frames: np.ndarray, batch: int = 8) -> np.ndarray:
        """Eval-mode post-BN embeddings for equal-length sequences (b, n, h, w) -> (b, s, d)."""
        out = []
        with T.no_grad():
            for lo in range(0, len(frames), batch):
                x = Tensor(np.asarray(frames[lo : lo + batch], dtype=self.dtype)[:, :, None])
                out.append(self.forward(x, train=False)[1].data)
        return np.concatenate(out, axis=0)


def embed_sequence(model: GaitModel, feats: Tensor, train: bool = False) -> Tensor:
    """Head applied to backbone features; returns the retrieval (post-BN) embedding."""
    return model.head(feats, train)[1]


# ---------------------------------------------------------------- loss


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


def ba_plus_triplet(embeddings: Tensor, labels: Sequence, cfg: TripletConfig = TripletConfig()) -> Tensor:
    """Separate batch-all triplet loss.

    Per strip, every (anchor, positive, negative) triple contributes
    ``max(0, d(a, p) - d(a, n) + margin)`` with Euclidean ``d``; the strip
    loss is the mean over the non-zero terms and the result the mean over
    strips.
    """
    labels = np.asarray(labels)
    e = embeddings.data
    if e.ndim != 3:
        raise T.ShapeError("rank", f"expected (b, s, d) embeddings, got {e.shape}")
    b, s, _ = e.shape
    if len(labels) != b:
        raise T.ShapeError("batch", f"{len(labels)} labels for {b} embeddings")
    if len(np.unique(labels)) < 2:
        raise ValueError("triplet loss needs at least two subjects in the batch")
    es = e.transpose(1, 0, 2)  # (s, b, d)
    diff = es[:, :, None, :] - es[:, None, :, :]
    dist = np.sqrt((diff**2).sum(-1))  # (s, b, b)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    valid = pos[:, :, None] & neg[:, None, :]  # (a, p, n)
    terms = dist[:, :, :, None] - dist[:, :, None, :] + e.dtype.type(cfg.margin)
    active = (terms > 0) & valid[None]
    counts = active.sum(axis=(1, 2, 3))
    sums = np.where(active, terms, 0).sum(axis=(1, 2, 3))
    strip_loss = np.where(counts > 0, sums / np.maximum(counts, 1), 0)
    loss = strip_loss.mean()
    if not np.isfinite(e).all():
        # NaN terms never compare > 0; surface them instead of reporting a zero loss
        loss = np.nan

    def backward(g):
        w = active * (g / (s * np.maximum(counts, 1)))[:, None, None, None]
        gdist = w.sum(axis=3) - w.sum(axis=2)  # (s, a, p) and (s, a, n) contributions
        safe = np.where(dist > 0, dist, 1)
        coef = np.where(dist > 0, gdist / safe, 0)[..., None] * diff  # d dist[a, j] / d e_a
        ge = coef.sum(axis=2) - coef.sum(axis=1)
        return (ge.transpose(1, 0, 2).astype(e.dtype),)

    return T._result(np.asarray(loss, dtype=e.dtype), (embeddings,), backward, "ba_plus_triplet")


# ---------------------------------------------------------------- batching


@dataclass(frozen=True)
class BatchSpec:
    p: int = 8
    k: int = 16

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ValueError(f"(P, K) must both be >= 2, got ({self.p}, {self.k})")


def pk_sample_batch(
    by_subject: Mapping[str, Sequence[int]], spec: BatchSpec, rng: np.random.Generator
) -> list[int]:
    """P distinct subjects, K sequence ids each (with replacement when short)."""
    subjects = sorted(by_subject)
    if len(subjects) < spec.p:
        raise ValueError(f"need at least {spec.p} subjects, dataset has {len(subjects)}")
    chosen = rng.choice(len(subjects), size=spec.p, replace=False)
    batch: list[int] = []
    for si in chosen:
        seqs = list(by_subject[subjects[si]])
        replace = len(seqs) < spec.k
        picks = rng.choice(len(seqs), size=spec.k, replace=replace)
        batch.extend(seqs[j] for j in picks)
    return batch


# ---------------------------------------------------------------- optimization


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Classical Adam with L2 weight decay folded into the gradient."""
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)


@dataclass(frozen=True)
class LRSchedule:
    base: float = 1e-4
    milestones: tuple[tuple[int, float], ...] = ((70000, 1e-5),)

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 1-based ``iteration``; a milestone m applies from m + 1 on."""
        lr = self.base
        for m, value in sorted(self.milestones):
            if iteration > m:
                lr = value
        return lr


class NonFiniteLossError(FloatingPointError):
    def __init__(self, diagnostics: dict):
        super().__init__(f"non-finite loss: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class Optimizer:
    schedule: LRSchedule = field(default_factory=LRSchedule)
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    state: AdamState = field(default_factory=AdamState)


def train_step(
    frames: np.ndarray,
    labels: Sequence,
    model: GaitModel,
    opt: Optimizer,
    rng: np.random.Generator,
    triplet: TripletConfig = TripletConfig(),
    diagnostics: dict | None = None,
) -> tuple[float, float]:
    """One forward/backward/Adam update on a (b, n, h, w) batch. Returns (loss, lr)."""
    iteration = opt.state.step + 1
    lr = opt.schedule.lr_at(iteration)
    x = Tensor(np.asarray(frames, dtype=model.dtype)[:, :, None])
    pre, _ = model.forward(x, train=True, rng=rng)
    loss = ba_plus_triplet(pre, labels, triplet)
    value = float(loss.data)
    if not np.isfinite(value):
        diag = {"iteration": iteration}
        diag.update(diagnostics or {})
        raise NonFiniteLossError(diag)
    model.zero_grad()
    loss.backward()
    adam_step(model.parameters(), opt.state, lr, opt.weight_decay, opt.betas, opt.eps)
    return value, lr
