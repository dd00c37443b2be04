"""Training loop and test-set evaluation shared by the CLI and the acceptance runs."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, optimizer_arrays, read_config_text, save_checkpoint, split_optimizer
from .config import RunConfig
from .data import DatasetIndex, SplitSpec, casia_split, oumvlp_split, sample_frames, synth_split
from .masking import random_erase_input
from .model import GaitModel, NonFiniteLossError, Optimizer, pk_sample_batch, train_step
from .protocol import EmbeddingSet, ProtocolResult, rank1_matrix

log = logging.getLogger(__name__)


@dataclass
class Streams:
    """Independent RNG streams derived from one run seed."""

    init_seed: int
    batch: np.random.Generator
    frames: np.random.Generator
    masks: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, reg_seed: int = 0) -> "Streams":
        root = np.random.SeedSequence([seed, reg_seed])
        init, batch, frames, masks = root.spawn(4)
        return cls(
            int(init.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)),
            np.random.default_rng(batch),
            np.random.default_rng(frames),
            np.random.default_rng(masks),
        )


def split_for(cfg: RunConfig, index: DatasetIndex) -> SplitSpec:
    name = cfg["data.split"]
    if name == "synth":
        return synth_split(index.subjects(), cfg["data.synth_train_ids"], {k.view for k in index.keys})
    if name == "oumvlp":
        return oumvlp_split(index.subjects())
    return casia_split(name)


@dataclass
class TrainResult:
    model: GaitModel
    optimizer: Optimizer
    losses: list[tuple[int, float, float]] = field(default_factory=list)
    seconds: float = 0.0


def loss_log_header(cfg: RunConfig, seed: int) -> str:
    return f"# config {cfg.hash} seed {seed}\niter,loss,lr\n"


def train(
    cfg: RunConfig,
    index: DatasetIndex,
    seed: int,
    out: Path | None = None,
    progress: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Run ``train.iters`` PK-batch steps on the training subjects of the configured split.

    With ``out`` set, ``loss.csv`` is written as training proceeds and
    checkpoints go to ``out/iter_<n>`` and ``out/final``.
    """
    split = split_for(cfg, index)
    train_ids = index.select(split.train_subjects)
    if not train_ids:
        raise ValueError("no training sequences in the dataset")
    by_subject = index.by_subject(train_ids)
    streams = Streams.from_seed(seed, cfg["reg.seed"])
    model = GaitModel(cfg.model_config(), seed=streams.init_seed)
    opt = cfg.optimizer()
    spec = cfg.batch_spec()
    triplet = cfg.triplet()
    n_frames = cfg["train.frames"]
    erase = cfg["train.random_erasing"]
    every = cfg["train.checkpoint_every"]
    result = TrainResult(model, opt)
    handle = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handle = open(out / "loss.csv", "w", newline="\n")
        handle.write(loss_log_header(cfg, seed))
    start = time.perf_counter()
    try:
        for it in range(1, cfg["train.iters"] + 1):
            batch = pk_sample_batch(by_subject, spec, streams.batch)
            clips = np.stack([sample_frames(index.frames(i), n_frames, True, streams.frames) for i in batch])
            clips = clips.astype(np.float32) / np.float32(255.0)
            if erase > 0:
                clips = np.stack([random_erase_input(c, erase, streams.frames) for c in clips])
            labels = [index.keys[i].subject for i in batch]
            diag = {"seed": seed, "config": cfg.hash}
            loss, lr = train_step(clips, labels, model, opt, streams.masks, triplet, diag)
            result.losses.append((it, loss, lr))
            if handle:
                handle.write(f"{it},{loss!r},{lr!r}\n")
            if progress:
                progress(it, loss, lr)
            if out is not None and every > 0 and it % every == 0 and it != cfg["train.iters"]:
                write_training_checkpoint(out / f"iter_{it:06d}", model, opt, cfg, seed, it)
    except NonFiniteLossError:
        if handle:
            handle.close()
        raise
    if handle:
        handle.close()
    result.seconds = time.perf_counter() - start
    if out is not None:
        write_training_checkpoint(out / "final", model, opt, cfg, seed, cfg["train.iters"])
    return result


def write_training_checkpoint(path: Path, model: GaitModel, opt: Optimizer, cfg: RunConfig, seed: int, it: int) -> None:
    arrays = model.state_arrays()
    arrays.update(optimizer_arrays(opt.state))
    meta = {"config": cfg.hash, "seed": seed, "iteration": it, "adam_step": opt.state.step}
    save_checkpoint(path, arrays, meta, cfg.emit())


def restore(path: Path) -> tuple[GaitModel, Optimizer, RunConfig, dict[str, str]]:
    """Rebuild model and optimizer from a checkpoint directory (KeyError/ShapeError on mismatch)."""
    arrays, meta = load_checkpoint(path)
    cfg = RunConfig.parse(read_config_text(path), str(Path(path) / "config.txt"), env={})
    model = GaitModel(cfg.model_config())
    params, state = split_optimizer(arrays, int(meta.get("adam_step", 0)))
    model.load_state_arrays(params)
    opt = cfg.optimizer()
    opt.state = state
    return model, opt, cfg, meta


def embed_indices(model: GaitModel, index: DatasetIndex, indices: Sequence[int], batch: int = 4) -> np.ndarray:
    """Eval-mode embeddings of whole sequences; equal-length sequences share a forward pass."""
    out: list[np.ndarray | None] = [None] * len(indices)
    by_len: dict[int, list[int]] = {}
    for pos, i in enumerate(indices):
        by_len.setdefault(len(index.frames(i)), []).append(pos)
    for positions in by_len.values():
        for lo in range(0, len(positions), batch):
            chunk = positions[lo : lo + batch]
            frames = np.stack([index.frames(indices[p]) for p in chunk]).astype(np.float32) / np.float32(255.0)
            emb = model.embed(frames, batch=len(chunk))
            for p, e in zip(chunk, emb):
                out[p] = e
    return np.stack(out)  # type: ignore[arg-type]


def evaluate(
    model: GaitModel, index: DatasetIndex, split: SplitSpec, batch: int = 4, exclude_invalid: bool = False
) -> ProtocolResult:
    test_ids = index.select(split.test_subjects)
    if not test_ids:
        raise ValueError("no test sequences in the dataset")
    emb = embed_indices(model, index, test_ids, batch)
    if not np.isfinite(emb).all():
        raise FloatingPointError("non-finite embeddings")
    return rank1_matrix(EmbeddingSet(emb, [index.keys[i] for i in test_ids]), split, exclude_invalid)
