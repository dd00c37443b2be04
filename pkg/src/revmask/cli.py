"""``revmask`` command line: train, eval, ablate, synth, gradcheck, heatmap, config.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 I/O error, 4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from . import data as D
from . import tensor as T
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, documented_defaults
from .protocol import cells_to_csv, condition_report, report_to_csv, report_to_text
from .train import evaluate, restore, split_for, train
from .verify import SCOPES, run_checks

log = logging.getLogger("revmask")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_CKPT = 0, 1, 2, 3, 4

PROTOCOLS = {
    "casia-b-st": ("casia-b", "st"),
    "casia-b-mt": ("casia-b", "mt"),
    "casia-b-lt": ("casia-b", "lt"),
    "oumvlp": ("oumvlp", "oumvlp"),
    "synth": ("synth", "synth"),
}

# regularizer pseudo-key -> config values; "name@p" additionally sets reg.prob
REGULARIZERS = {
    "none": {"block.variant": "conv"},
    "dropblock": {"block.variant": "dropblock"},
    "scaling_dropblock": {"block.variant": "scaling_dropblock"},
    "plain_dropping": {"block.variant": "plain_dropping"},
    "plain_scaling": {"block.variant": "plain_scaling"},
    "inception": {"block.variant": "inception"},
    "random_erasing": {"block.variant": "conv", "train.random_erasing": "0.5"},
    "inception+random_erasing": {"block.variant": "inception", "train.random_erasing": "0.5"},
}

# the comparison table: baseline plus eight regularized rows
REGULARIZER_TABLE = (
    "none",
    "random_erasing",
    "dropblock@0.5",
    "dropblock@1",
    "scaling_dropblock@1",
    "plain_dropping@1",
    "plain_scaling@1",
    "inception@1",
    "inception+random_erasing",
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _load_config(path: str | None, preset: str | None = None) -> RunConfig:
    if path is None:
        return RunConfig.preset(preset) if preset else RunConfig.parse("", env=os.environ)
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_USAGE, f"config file {p} not found")
    return RunConfig.load(p)


def _load_dataset(root: str | Path, cfg: RunConfig, kind: str | None = None) -> D.DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise CliError(EXIT_IO, f"data root {root} does not exist")
    if (root / D.MANIFEST).exists():
        return D.load_cache(root)
    kind = kind or cfg["data.kind"]
    if kind == "synth":
        raise CliError(EXIT_IO, f"{root} has no {D.MANIFEST}; run `revmask synth` first")
    layout = "oumvlp" if kind == "oumvlp" else "casia-b"
    if cfg["data.cache_dir"]:
        return D.cached_casia_b(root, cfg["data.cache_dir"], kind=layout)
    return D.load_casia_b(root, kind=layout)


def _parse_views(text: str) -> list[int]:
    if ":" in text:
        lo, hi, step = (int(x) for x in text.split(":"))
        return list(range(lo, hi + 1, step))
    return [int(v) for v in text.split(",") if v.strip()]


def _parse_trials(text: str) -> dict[str, int]:
    out = {}
    for part in text.split(","):
        name, _, n = part.partition("=")
        out[name.strip().lower()] = int(n)
    return out


def _stamp(cfg: RunConfig, seed: int | str) -> str:
    return f"# config {cfg.hash} seed {seed}\n"


def _write_eval(out: Path, result, cfg: RunConfig, seed, split_name: str, method: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = condition_report(result, split_name, method)
    stamp = _stamp(cfg, seed)
    (out / "cells.csv").write_text(stamp + cells_to_csv(result, split_name))
    (out / "summary.csv").write_text(stamp + report_to_csv(rows, result.views))
    (out / "summary.txt").write_text(stamp + report_to_text(rows, result.views))


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.preset)
    index = _load_dataset(args.data_root, cfg)
    out = Path(args.out)

    def progress(it, loss, lr):
        if it % max(1, args.log_every) == 0:
            log.info("iter %d loss %.5f lr %g", it, loss, lr)

    result = train(cfg, index, args.seed, out, progress)
    (out / "config.txt").write_text(_stamp(cfg, args.seed) + cfg.emit())
    print(f"trained {cfg['train.iters']} iterations in {result.seconds:.1f}s; final loss {result.losses[-1][1]:.5f}")
    print(f"checkpoint: {out / 'final'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.protocol not in PROTOCOLS:
        raise CliError(EXIT_USAGE, f"unknown protocol {args.protocol!r}; choose from {', '.join(PROTOCOLS)}")
    kind, split_name = PROTOCOLS[args.protocol]
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(EXIT_IO, f"checkpoint {ckpt} not found")
    try:
        model, _, cfg, meta = restore(ckpt)
    except (KeyError, T.ShapeError, CheckpointError) as exc:
        name = exc.args[0] if exc.args else "?"
        raise CliError(EXIT_CKPT, f"checkpoint mismatch at tensor {name}: {exc}") from None
    cfg = cfg.with_values({"data.kind": kind, "data.split": split_name})
    index = _load_dataset(args.data_root, cfg, kind)
    split = split_for(cfg, index)
    result = evaluate(model, index, split, cfg["eval.batch"], cfg["eval.exclude_invalid"])
    out = Path(args.out) if args.out else ckpt / f"eval-{args.protocol}"
    _write_eval(out, result, cfg, meta.get("seed", "?"), split.name, args.method or cfg["block.variant"])
    print(report_to_text(condition_report(result, split.name, args.method or cfg["block.variant"]), result.views), end="")
    print(f"mean rank-1 {result.grand_mean():.4f}; tables in {out}")
    return EXIT_OK


def _parse_grid(spec: str) -> list[tuple[str, list[str]]]:
    """``key=v1,v2;key2=...`` inline, or a file with one ``key = v1, v2`` per line.

    Values containing commas are separated with ``|`` instead. The value
    ``table`` for ``regularizer`` expands to the full comparison table.
    """
    p = Path(spec)
    text = p.read_text() if p.is_file() else spec.replace(";", "\n")
    grid = []
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = values', got {line!r}", no, spec if p.is_file() else "--grid")
        key, _, vals = line.partition("=")
        key = key.strip()
        sep = "|" if "|" in vals else ","
        values = [v.strip() for v in vals.split(sep) if v.strip()]
        if key == "regularizer" and values == ["table"]:
            values = list(REGULARIZER_TABLE)
        if not values:
            raise ConfigError(f"no values for {key}", no, spec if p.is_file() else "--grid")
        grid.append((key, values))
    return grid


def _point_config(base: RunConfig, point: dict[str, str]) -> RunConfig:
    updates: dict[str, str] = {}
    for key, val in point.items():
        if key == "regularizer":
            name, _, prob = val.partition("@")
            if name not in REGULARIZERS:
                raise ConfigError(f"unknown regularizer {name!r}; choose from {', '.join(REGULARIZERS)}")
            updates.update(REGULARIZERS[name])
            if prob:
                updates["reg.prob"] = prob
        else:
            updates[key] = val
    return base.with_values(updates)


def cmd_ablate(args) -> int:
    base = _load_config(args.config, args.preset)
    grid = _parse_grid(args.grid)
    if not grid:
        raise CliError(EXIT_USAGE, "empty grid")
    keys = [k for k, _ in grid]
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in grid))]
    configs = [_point_config(base, p) for p in points]  # validate everything before training
    index = _load_dataset(args.data_root, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["point", *keys, "NM", "BG", "CL", "mean", "config"]
    lines = [_stamp(base, args.seed).rstrip("\n"), ",".join(header)]
    for i, (point, cfg) in enumerate(zip(points, configs)):
        run_dir = out / f"point_{i:03d}"
        log.info("grid point %d/%d: %s", i + 1, len(points), point)
        result = train(cfg, index, args.seed, run_dir)
        res = evaluate(result.model, index, split_for(cfg, index), cfg["eval.batch"], cfg["eval.exclude_invalid"])
        _write_eval(run_dir / "eval", res, cfg, args.seed, split_for(cfg, index).name, ";".join(point.values()))
        means = [res.condition_mean(c) if c in res.matrices else float("nan") for c in ("nm", "bg", "cl")]
        lines.append(",".join([str(i), *point.values(), *(repr(m) for m in means), repr(res.grand_mean()), cfg.hash]))
        (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print((out / "ablation.csv").read_text(), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.ids < 2:
        raise CliError(EXIT_USAGE, f"--ids must be >= 2, got {args.ids}")
    views = _parse_views(args.views)
    trials = _parse_trials(args.trials)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from None
    index = D.synth_generate(args.ids, views, trials, args.frames, args.seed)
    header = {
        "generator": "synth",
        "ids": args.ids,
        "views": ",".join(str(v) for v in views),
        "trials": args.trials,
        "frames": args.frames,
        "seed": args.seed,
        "effective_seed": getattr(index, "seed", args.seed),
    }
    D.write_cache(index, out, header)
    print(f"wrote {len(index)} sequences to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = []

    def report(r):
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:28s} {r.error:.3e}  {status}", flush=True)
        if not r.ok:
            failed.append(r)

    run_checks(args.scope, args.seed, report)
    if failed:
        for r in failed:
            print(f"gradient check failed: {r.name} relative error {r.error:.3e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def activation_energy(model, frames: np.ndarray) -> np.ndarray:
    """Per-frame activation-energy maps at the final stage, (n, 64, 44) in [0, 255].

    Energy is the channel mean of |A(x) - A(0)|, the change relative to a
    blank input, so an all-zero sequence gives a uniform (zero) map. Each map
    is scaled so its maximum becomes 255. Height-concatenated branches are
    averaged back to a single map.
    """
    x = np.asarray(frames, dtype=model.dtype)[None, :, None]
    with T.no_grad():
        act = model.backbone(T.Tensor(x), train=False).data[0]
        blank = model.backbone(T.Tensor(np.zeros_like(x)), train=False).data[0]
    energy = np.abs(act - blank).mean(axis=1)  # (n, H, W)
    if model.cfg.concat_final:
        k = len(model.cfg.branches)
        n, h, w = energy.shape
        energy = energy.reshape(n, k, h // k, w).mean(axis=1)
    maps = []
    for e in energy:
        up = cv2.resize(e.astype(np.float32), (D.OUT_W, D.OUT_H), interpolation=cv2.INTER_LINEAR)
        up = np.maximum(up, 0.0)
        peak = up.max()
        maps.append(np.round(up / peak * 255.0).astype(np.uint8) if peak > 0 else np.zeros_like(up, dtype=np.uint8))
    return np.stack(maps)


def _read_sequence(path: Path) -> np.ndarray:
    if path.is_file():
        return D.read_seq(path).astype(np.float32) / 255.0
    if path.is_dir():
        seq = path / "frames.seq"
        if seq.exists():
            return D.read_seq(seq).astype(np.float32) / 255.0
        frames = D._load_png_dir(path, D.SequenceKey("?", "nm", 0, 0))
        if frames is None:
            raise CliError(EXIT_IO, f"no usable frames in {path}")
        return frames.astype(np.float32) / 255.0
    raise CliError(EXIT_IO, f"sequence {path} not found")


def cmd_heatmap(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(EXIT_IO, f"checkpoint {ckpt} not found")
    try:
        model, _, cfg, meta = restore(ckpt)
    except (KeyError, T.ShapeError, CheckpointError) as exc:
        raise CliError(EXIT_CKPT, f"checkpoint mismatch: {exc}") from None
    frames = _read_sequence(Path(args.sequence))
    maps = activation_energy(model, frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(maps):
        if not cv2.imwrite(str(out / f"{i:04d}.png"), m):
            raise CliError(EXIT_IO, f"failed to write {out / f'{i:04d}.png'}")
    (out / "heatmap.txt").write_text(_stamp(cfg, meta.get("seed", "?")) + f"source {args.sequence}\nframes {len(maps)}\n")
    print(f"wrote {len(maps)} maps to {out}")
    return EXIT_OK


def cmd_config(args) -> int:
    if args.preset:
        text = RunConfig.preset(args.preset).emit(docs=args.docs)
    else:
        text = documented_defaults() if args.docs else RunConfig().emit()
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="revmask", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--preset", help="start from a named preset when --config is absent")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank-1 evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--out")
    p.add_argument("--method", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every point of a config grid")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--grid", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="render a synthetic walker dataset")
    p.add_argument("--ids", type=int, required=True)
    p.add_argument("--views", default="0:180:18", help="comma list or lo:hi:step")
    p.add_argument("--trials", default="nm=6,bg=2,cl=2")
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=SCOPES, default="op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", help="per-frame activation-energy maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("config", help="print the default or a preset configuration")
    p.add_argument("--preset")
    p.add_argument("--docs", action="store_true")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"revmask: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"revmask: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"revmask: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except (D.DatasetLayoutError, D.EmptySilhouetteError, OSError) as exc:
        print(f"revmask: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # configuration that parses but does not fit the data, e.g. too few subjects for (P, K)
        print(f"revmask: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
