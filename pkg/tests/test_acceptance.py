"""Acceptance criteria, one PASS/FAIL line each.

The desk-scale runs (criteria 9 and 10) train four 2,000-iteration models
on one synthetic corpus and take roughly half an hour on one CPU core.
"""

import time

import numpy as np
import pytest

from revmask import tensor as T
from revmask.blocks import init_conv, rmfe_forward
from revmask.checkpoint import load_checkpoint, save_checkpoint
from revmask.cli import main
from revmask.config import RunConfig
from revmask.data import CASIA_VIEWS, synth_generate, write_cache
from revmask.masking import (
    Policy,
    RegConfig,
    Sampler,
    ScalePair,
    apply_reverse_mask,
    dropblock_apply,
    maybe_regularize,
    reverse_mask,
    sample_mask,
    sample_scale_pair,
)
from revmask.model import ba_plus_triplet
from revmask.protocol import EmbeddingSet, rank1_matrix
from revmask.data import SplitSpec
from revmask.tensor import Tensor
from revmask.train import evaluate, restore, split_for, train

from oracles import brute_rank1, brute_triplet, random_protocol_instance

SAMPLERS = list(Sampler)
POLICIES = [Policy.DROPPING, Policy.SCALING, Policy.FIXED]


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, detail

    return emit


def draw_reg(rng, h, prob=0.5):
    """Random sampler and a mask ratio that leaves a non-degenerate band for height h."""
    ratio = (int(rng.integers(1, h)) + float(rng.uniform(-0.4, 0.4))) / h
    return RegConfig(prob=prob, mask_ratio=ratio, sampler=SAMPLERS[int(rng.integers(0, len(SAMPLERS)))])


def random_instance(rng, dtype=np.float32):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(4, 17)), int(rng.integers(2, 12)))
    x = Tensor(rng.standard_normal(shape).astype(dtype))
    m = sample_mask(draw_reg(rng, shape[3]), shape[3], shape[4], rng)
    policy = POLICIES[int(rng.integers(0, 3))]
    sp = sample_scale_pair(ScalePair(*rng.uniform(size=2)) if policy is Policy.FIXED else policy, rng)
    return x, m, sp


def test_c01_reconstruction_identity(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        x, m, sp = random_instance(rng)
        pf = apply_reverse_mask(x, m, sp)
        assert pf.masked_out.dtype == np.float32
        worst = max(worst, float(np.abs(pf.masked_out.data + pf.paired_out.data - x.data).max()))
    secs = time.perf_counter() - start
    report(1, worst <= 1e-6 and secs < 5, f"reconstruction max error {worst:.2e} (tol 1e-6) over 1000 float32 instances in {secs:.2f}s (limit 5s)")


def test_c02_degeneracy(report):
    rng = np.random.default_rng(2)
    drop_ok = half_ok = rev_ok = 0
    for _ in range(500):
        x, _, _ = random_instance(rng)
        cfg = draw_reg(rng, x.shape[3], prob=1.0)
        seed = int(rng.integers(0, 2**32))
        db = dropblock_apply(x, cfg, np.random.default_rng(seed))
        pf = maybe_regularize(x, cfg, Policy.DROPPING, np.random.default_rng(seed))
        drop_ok += np.array_equal(db.data, pf.masked_out.data)
    for _ in range(500):
        x, m, _ = random_instance(rng)
        pf = apply_reverse_mask(x, m, ScalePair(0.5, 0.5))
        half_ok += np.array_equal(pf.masked_out.data, x.data / 2) and np.array_equal(pf.paired_out.data, x.data / 2)
    for _ in range(500):
        _, m, _ = random_instance(rng)
        rev_ok += reverse_mask(reverse_mask(m)) == m
    ok = drop_ok == half_ok == rev_ok == 500
    report(2, ok, f"dropping == DropBlock {drop_ok}/500, Fixed(0.5,0.5) halves == x/2 {half_ok}/500, reverse twice == identity {rev_ok}/500")


def test_c03_linear_cancellation(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        x, m, sp = random_instance(rng, np.float64)
        p = init_conv(x.shape[2], int(rng.integers(1, 5)), rng, dtype=np.float64, bias=False)
        out = rmfe_forward(apply_reverse_mask(x, m, sp), p, activation=False)
        worst = max(worst, float(np.abs(out.data - T.conv3d(x, p.weight, None, padding=1).data).max()))
    report(3, worst <= 1e-5, f"linear RMFE vs conv3d max difference {worst:.2e} (tol 1e-5) over 100 instances")


def test_c04_gradient_verification(report, capsys):
    start = time.perf_counter()
    code = main(["gradcheck", "--scope", "model"])
    secs = time.perf_counter() - start
    lines = [line.split() for line in capsys.readouterr().out.splitlines() if line.strip()]
    worst = max(float(parts[1]) for parts in lines)
    names = [parts[0] for parts in lines]
    covered = {"leaky_relu", "conv3d.weight", "gem_pool_strip", "rmfe", "inception_rmb.concat", "ba_plus_triplet", "model.inception"}
    ok = code == 0 and secs < 120 and covered <= set(names) and len(names) == len(set(names))
    report(4, ok, f"gradcheck --scope model exit {code}, {len(names)} checks, max relative error {worst:.2e} (tol 1e-4), {secs:.1f}s (limit 120s)")


def test_c05_mask_statistics(report):
    rng = np.random.default_rng(5)
    cfg = RegConfig(mask_ratio=0.3, sampler=Sampler.IID_UNIT)
    zero = 1 - np.mean([sample_mask(cfg, 8, 8, rng).bits.mean() for _ in range(10_000)])
    draws = np.array([[sp.alpha, sp.beta] for sp in (sample_scale_pair(Policy.SCALING, rng) for _ in range(100_000))])
    means = draws.mean(axis=0)
    corr = float(np.corrcoef(draws.T)[0, 1])
    ok = abs(zero - 0.3) <= 0.01 and np.all(np.abs(means - 0.5) <= 0.01) and abs(corr) < 0.02
    report(5, ok, f"IidUnit zero fraction {zero:.4f} (ratio 0.3 +-0.01); alpha/beta means {means[0]:.4f}/{means[1]:.4f} (0.5 +-0.01); correlation {corr:+.4f} (|r| < 0.02)")


def test_c06_protocol_oracle(report):
    rng = np.random.default_rng(6)
    matched = 0
    for _ in range(50):
        emb, keys = random_protocol_instance(rng, CASIA_VIEWS, max_subjects=10, max_sequences=200)
        split = SplitSpec("T", (), tuple(sorted({k.subject for k in keys})))
        res = rank1_matrix(EmbeddingSet(emb, keys), split)
        want = brute_rank1(emb, keys, split)
        same = True
        for cond, mat in res.matrices.items():
            assert np.isnan(np.diag(mat)).all()
            assert np.isnan(np.diag(res._offdiag(cond))).all()
            for i, vp in enumerate(CASIA_VIEWS):
                for j, vg in enumerate(CASIA_VIEWS):
                    cell = want[cond].get((vp, vg), np.nan)
                    same &= (np.isnan(cell) and np.isnan(mat[i, j])) or cell == mat[i, j]
        matched += same
    report(6, matched == 50, f"rank1_matrix equals the nested-loop oracle exactly on {matched}/50 instances; diagonal structurally NaN")


def test_c07_triplet_oracle(report):
    def loss(values, labels):
        return float(ba_plus_triplet(Tensor(np.array(values, dtype=np.float64)[:, None, None]), labels).data)

    f1 = loss([0.0, 0.1, 1.0, 1.1], list("AABB"))
    h1 = brute_triplet(np.array([0.0, 0.1, 1.0, 1.1])[:, None, None], list("AABB"), 0.2)
    f2 = loss([0.0, 0.5, 0.6], list("AAB"))
    h2 = brute_triplet(np.array([0.0, 0.5, 0.6])[:, None, None], list("AAB"), 0.2)
    same = float(ba_plus_triplet(Tensor(np.zeros((6, 4, 8))), [0, 0, 1, 1, 2, 2]).data)
    ok = abs(f1 - h1) <= 1e-6 and h1 == 0 and abs(f2 - h2) <= 1e-6 and abs(h2 - 0.35) <= 1e-12 and abs(same - 0.2) <= 1e-6
    report(
        7,
        ok,
        f"fixture A{{0,0.1}} B{{1,1.1}}: {f1:.6f} (enumerated {h1:.6f}); fixture A{{0,0.5}} B{{0.6}}: {f2:.6f} "
        f"(enumerated terms 0.1 and 0.6, mean {h2:.6f}); identical embeddings: {same:.6f} (margin 0.2)",
    )


def test_c08_gem(report):
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(0.01, 2.0, size=(3, 4, 8, 5)))
    g1 = T.gem_pool_strip(x, 4, power=1.0).data
    mean = x.data.reshape(3, 4, 4, 2, 5).mean(axis=(3, 4)).transpose(0, 2, 1)
    exact = np.array_equal(g1, mean) or np.abs(g1 - mean).max() <= 4 * np.finfo(np.float64).eps
    v = float(T.gem_pool_strip(Tensor(np.array([[[[0.5, 1.0]]]])), 1, power=6.5).data.ravel()[0])
    report(8, exact and abs(v - 0.9004) <= 1e-3, f"GeM p=1 equals strip mean (max diff {np.abs(g1 - mean).max():.1e}); GeM_6.5{{0.5, 1.0}} = {v:.5f} (0.9004 +-1e-3)")


# ---------------------------------------------------------------- desk scale

_DESK: dict[str, dict] = {}


@pytest.fixture(scope="module")
def desk_data():
    return synth_generate(20, views=CASIA_VIEWS, frames=40, seed=7)


def desk_run(index, regularizer):
    if regularizer not in _DESK:
        from revmask.cli import _point_config

        cfg = _point_config(RunConfig.preset("desk"), {"regularizer": regularizer})
        start = time.perf_counter()
        result = train(cfg, index, seed=0)
        res = evaluate(result.model, index, split_for(cfg, index), cfg["eval.batch"])
        means = {c: res.condition_mean(c) for c in ("nm", "bg", "cl")}
        means["mean"] = res.grand_mean()
        means["seconds"] = time.perf_counter() - start
        _DESK[regularizer] = means
    return _DESK[regularizer]


def fmt(r):
    return f"NM {r['nm']:.4f} BG {r['bg']:.4f} CL {r['cl']:.4f}"


def test_c09_desk_end_to_end(report, desk_data):
    base = desk_run(desk_data, "none")
    inc = desk_run(desk_data, "inception@1")
    margin = inc["cl"] - base["cl"]
    ok = inc["nm"] >= 0.90 and margin > 0
    report(
        9,
        ok,
        f"inception {fmt(inc)} ({inc['seconds']:.0f}s, target < 900s); baseline {fmt(base)}; "
        f"NM >= 0.90 required, CL margin {margin:+.4f} (> 0 required)",
    )


def test_c10_harsh_dropping_guard(report, desk_data):
    db = desk_run(desk_data, "dropblock@1")
    plain = desk_run(desk_data, "plain_dropping@1")
    ok = db["mean"] < plain["mean"]
    report(10, ok, f"DropBlock@1 {fmt(db)} mean {db['mean']:.4f} < plain dropping@1 {fmt(plain)} mean {plain['mean']:.4f}")


def test_c11_determinism(report, tmp_path, desk_data):
    data = tmp_path / "data"
    write_cache(desk_data, data)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(RunConfig.preset("desk").with_values({"train.iters": "25", "block.variant": "inception"}).emit())
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data-root", str(data), "--out", str(tmp_path / name), "--seed", "3"]) == 0
    logs_equal = (tmp_path / "a/loss.csv").read_bytes() == (tmp_path / "b/loss.csv").read_bytes()
    arrays, meta = load_checkpoint(tmp_path / "a/final")
    save_checkpoint(tmp_path / "copy", arrays, meta, (tmp_path / "a/final/config.txt").read_text())
    files_equal = all(
        (tmp_path / "a/final" / f).read_bytes() == (tmp_path / "copy" / f).read_bytes() for f in ("manifest.txt", "tensors.bin", "config.txt")
    )
    back, _ = load_checkpoint(tmp_path / "copy")
    model, _, _, _ = restore(tmp_path / "copy")
    arrays_equal = all(np.array_equal(arrays[k], back[k]) and arrays[k].dtype == back[k].dtype for k in arrays)
    model_equal = all(np.array_equal(v, arrays[k]) for k, v in model.state_arrays().items())
    ok = logs_equal and files_equal and arrays_equal and model_equal
    report(
        11,
        ok,
        f"repeated train loss logs byte-identical: {logs_equal}; checkpoint re-save byte-identical: {files_equal}; "
        f"arrays bit-exact: {arrays_equal}; restored model bit-exact: {model_equal}",
    )
