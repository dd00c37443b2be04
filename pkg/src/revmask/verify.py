"""Finite-difference gradient checks over ops, blocks and the full model (float64)."""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, Fusion, Variant, inception_rmb_forward, init_conv, plain_rmb_forward, rmfe_forward
from .masking import (
    Policy,
    RegConfig,
    ScalePair,
    apply_reverse_mask,
    bipartition_mask,
    dropblock_apply,
    scaling_dropblock_apply,
)
from .model import GaitModel, ModelConfig, StageKind, TripletConfig, ba_plus_triplet
from .tensor import Tensor

TOLERANCE = 1e-4
F64 = np.float64
SCOPES = ("op", "block", "model")


@dataclasses.dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= TOLERANCE


def _proj(shape, rng) -> np.ndarray:
    return rng.standard_normal(shape)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return T.weighted_sum(out, w)


def _op_check(fn: Callable[[Tensor], Tensor], x: np.ndarray, rng, step: float = 1e-6) -> float:
    w = None

    def f(t: Tensor) -> Tensor:
        nonlocal w
        out = fn(t)
        if w is None:
            w = _proj(out.shape, rng)
        return _scalar(out, w)

    return T.finite_diff_check(f, x, step)


def _params_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], rng, per_tensor: int = 4) -> float:
    """Check a few coordinates of every tensor whose analytic gradient is non-negligible.

    Coordinates with a gradient below 1% of the tensor's largest one are
    skipped: there the relative error measures rounding noise, not the rule.
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss_fn().backward()
    coords = {}
    for name, p in params.items():
        g = np.abs(p.grad.reshape(-1)) if p.grad is not None else np.zeros(p.data.size)
        cand = np.flatnonzero(g >= 1e-2 * g.max()) if g.max() > 0 else np.array([], dtype=int)
        if cand.size:
            coords[name] = rng.choice(cand, size=min(per_tensor, cand.size), replace=False)
    errs = T.finite_diff_params(loss_fn, params, coords)
    return max(errs.values()) if errs else 0.0


# ---------------------------------------------------------------- ops


def op_checks(seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed)
    x5 = rng.standard_normal((2, 3, 2, 6, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
    b = rng.standard_normal(3)
    wt, bt = Tensor(w), Tensor(b)
    other = rng.standard_normal((2, 3, 2, 6, 4))
    feats = rng.uniform(0.5, 1.5, (2, 2, 8, 3))
    strip_x = rng.standard_normal((3, 2, 4))
    fc = Tensor(rng.standard_normal((2, 4, 3)))
    bn_x = rng.standard_normal((5, 2, 3))
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, (2, 3))), Tensor(rng.standard_normal((2, 3)))

    def bn(t: Tensor) -> Tensor:
        state = T.BatchNormState((2, 3), dtype=F64)
        return T.batchnorm_1d(t, gamma, beta, state, train=True)

    return [
        ("add", lambda: _op_check(lambda t: T.add(t, Tensor(other)), x5, rng)),
        ("mul", lambda: _op_check(lambda t: T.mul(t, Tensor(other)), x5, rng)),
        ("sum_all", lambda: T.finite_diff_check(lambda t: T.sum_all(T.mul(t, t)), x5)),
        ("weighted_sum", lambda: T.finite_diff_check(lambda t: T.weighted_sum(t, other), x5)),
        ("leaky_relu", lambda: _op_check(lambda t: T.leaky_relu(t, 0.01), x5, rng)),
        ("concat", lambda: _op_check(lambda t: T.concat([t, T.mul(t, 2.0)], axis=3), x5, rng)),
        ("conv3d.input", lambda: _op_check(lambda t: T.conv3d(t, wt, bt, padding=1), x5, rng)),
        ("conv3d.weight", lambda: _op_check(lambda t: T.conv3d(Tensor(x5), t, bt, padding=1), w, rng)),
        ("conv3d.bias", lambda: _op_check(lambda t: T.conv3d(Tensor(x5), wt, t, padding=1), b, rng)),
        ("conv3d_reference.input", lambda: _op_check(lambda t: T.conv3d_reference(t, wt, bt, padding=1), x5, rng)),
        ("conv3d_reference.weight", lambda: _op_check(lambda t: T.conv3d_reference(Tensor(x5), t, bt, padding=1), w, rng)),
        ("max_pool_hw", lambda: _op_check(lambda t: T.max_pool_hw(t, 2, 2), x5, rng)),
        ("temporal_max_pool", lambda: _op_check(T.temporal_max_pool, x5, rng)),
        ("gem_pool_strip", lambda: _op_check(lambda t: T.gem_pool_strip(t, 4, 6.5), feats, rng)),
        ("linear_map.input", lambda: _op_check(lambda t: T.linear_map(t, fc), strip_x, rng)),
        ("linear_map.weight", lambda: _op_check(lambda t: T.linear_map(Tensor(strip_x), t), fc.data, rng)),
        ("batchnorm_1d", lambda: _op_check(bn, bn_x, rng)),
    ]


# ---------------------------------------------------------------- blocks


def block_checks(seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((2, 3, 2, 6, 4))
    reg = RegConfig(prob=1.0, mask_ratio=0.5)
    convs = {k: init_conv(2, 3, rng, dtype=F64) for k in ("g", "d", "s")}
    for p in convs.values():
        p.bias.data = rng.standard_normal(3) * 0.1

    def run(fn):
        def check() -> float:
            w = None

            def f(t: Tensor) -> Tensor:
                nonlocal w
                out = fn(t)
                if w is None:
                    w = _proj(out.shape, rng)
                return _scalar(out, w)

            return T.finite_diff_check(f, x)

        return check

    fixed = ScalePair(0.3, 0.8)
    plain_d = BlockConfig(2, 3, Variant.PLAIN_DROPPING, Fusion.SUM, reg)
    plain_s = BlockConfig(2, 3, Variant.PLAIN_SCALING, Fusion.SUM, reg)
    inc_sum = BlockConfig(2, 3, Variant.INCEPTION, Fusion.SUM, reg)
    inc_cat = BlockConfig(2, 3, Variant.INCEPTION, Fusion.CONCAT_HEIGHT, reg)
    g, d, s = convs["g"], convs["d"], convs["s"]

    def params_of(*ps):
        out = {}
        for tag, p in zip("gds", ps):
            out[f"{tag}.weight"] = p.weight
            out[f"{tag}.bias"] = p.bias
        return out

    xt = Tensor(x)
    prng = np.random.default_rng(seed + 2)
    return [
        ("rmfe", run(lambda t: rmfe_forward(apply_reverse_mask(t, bipartition_mask(6, 4), fixed), g))),
        ("plain_rmb.dropping", run(lambda t: plain_rmb_forward(t, plain_d, g, np.random.default_rng(3)))),
        ("plain_rmb.scaling", run(lambda t: plain_rmb_forward(t, plain_s, g, np.random.default_rng(3)))),
        ("plain_rmb.eval", run(lambda t: plain_rmb_forward(t, plain_s, g, None, train=False))),
        ("dropblock", run(lambda t: dropblock_apply(t, reg, np.random.default_rng(6)))),
        ("scaling_dropblock", run(lambda t: scaling_dropblock_apply(t, reg, np.random.default_rng(6)))),
        ("inception_rmb.sum", run(lambda t: inception_rmb_forward(t, inc_sum, g, d, s, np.random.default_rng(4)))),
        (
            "inception_rmb.concat",
            run(lambda t: inception_rmb_forward(t, inc_cat, g, d, s, np.random.default_rng(4), final_stage=True)),
        ),
        (
            "inception_rmb.params",
            lambda: _params_check(
                lambda: T.sum_all(
                    inception_rmb_forward(xt, inc_sum, g, d, s, np.random.default_rng(5), policies=(Policy.DROPPING, fixed))
                ),
                params_of(g, d, s),
                prng,
            ),
        ),
    ]


# ---------------------------------------------------------------- model


def desk_model_config() -> ModelConfig:
    return ModelConfig(pools=((4, 4), (1, 2)), reg=RegConfig(prob=1.0, mask_ratio=0.5))


def model_checks(seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed + 10)
    labels = ["a", "a", "b", "b"]

    def triplet_check() -> float:
        # spread-out points keep every hinge term away from its kink
        e = rng.standard_normal((4, 3, 5))
        return T.finite_diff_check(lambda t: ba_plus_triplet(t, labels, TripletConfig(0.2)), e)

    def model_check(block: StageKind) -> Callable[[], float]:
        def check() -> float:
            cfg = dataclasses.replace(desk_model_config(), block=block)
            model = GaitModel(cfg, seed=seed, dtype=F64)
            for p in model.parameters().values():
                if p.data.ndim == 1 and np.all(p.data == 0):
                    p.data = rng.standard_normal(p.data.shape) * 0.05
            frames = Tensor((rng.random((4, 3, 1, 64, 44)) > 0.5).astype(F64) * rng.uniform(0.5, 1.0))

            def loss() -> Tensor:
                pre, _ = model.forward(frames, train=True, rng=np.random.default_rng(seed + 11))
                return ba_plus_triplet(pre, labels, TripletConfig(0.2))

            return _params_check(loss, dict(model.parameters()), rng, per_tensor=3)

        return check

    return [
        ("ba_plus_triplet", triplet_check),
        ("model.inception", model_check(StageKind.INCEPTION)),
        ("model.baseline", model_check(StageKind.CONV)),
    ]


def checks_for(scope: str, seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {', '.join(SCOPES)}")
    out = op_checks(seed)
    if scope in ("block", "model"):
        out += block_checks(seed)
    if scope == "model":
        out += model_checks(seed)
    return out


def run_checks(scope: str, seed: int = 0, report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in checks_for(scope, seed):
        try:
            err = float(fn())
        except FloatingPointError:
            err = float("inf")
        res = CheckResult(name, err)
        results.append(res)
        if report:
            report(res)
    return results
