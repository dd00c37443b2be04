"""Cross-view rank-1 evaluation (identical views excluded) and report tables."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SequenceKey, SplitSpec

log = logging.getLogger(__name__)


@dataclass
class EmbeddingSet:
    """Post-BN descriptors (n, strips, dim) with one key per row."""

    embeddings: np.ndarray
    keys: list[SequenceKey]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim == 2:
            self.embeddings = self.embeddings[:, None, :]
        if self.embeddings.ndim != 3 or len(self.embeddings) != len(self.keys):
            raise ValueError(f"embeddings {self.embeddings.shape} do not match {len(self.keys)} keys")

    def flat(self) -> np.ndarray:
        return self.embeddings.reshape(len(self.embeddings), -1).astype(np.float64)


def pairwise_distances(probe, gallery) -> np.ndarray:
    """Euclidean distances between flattened (strips * dim) descriptors, (n_probe, n_gallery)."""
    p = probe.embeddings if isinstance(probe, EmbeddingSet) else np.asarray(probe)
    g = gallery.embeddings if isinstance(gallery, EmbeddingSet) else np.asarray(gallery)
    if p.shape[1:] != g.shape[1:]:
        raise ValueError(f"descriptor shapes differ: probe {p.shape[1:]} vs gallery {g.shape[1:]}")
    p = p.reshape(len(p), -1).astype(np.float64)
    g = g.reshape(len(g), -1).astype(np.float64)
    sq = (p * p).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * (p @ g.T)
    return np.sqrt(np.maximum(sq, 0.0))


@dataclass
class ProtocolResult:
    """Per-condition probe-view x gallery-view rank-1 matrices.

    Diagonal cells (identical views) and cells without probes hold NaN and
    never enter a mean.
    """

    views: tuple[int, ...]
    matrices: dict[str, np.ndarray]
    counts: dict[str, np.ndarray] = field(default_factory=dict)

    def _offdiag(self, cond: str) -> np.ndarray:
        m = self.matrices[cond].copy()
        np.fill_diagonal(m, np.nan)
        return m

    def per_view_mean(self, cond: str) -> np.ndarray:
        m = self._offdiag(cond)
        assert np.isnan(np.diag(m)).all()
        out = np.full(len(self.views), np.nan)
        for i in range(len(self.views)):
            row = m[i][~np.isnan(m[i])]
            if row.size:
                out[i] = row.mean()
        return out

    def condition_mean(self, cond: str) -> float:
        pv = self.per_view_mean(cond)
        pv = pv[~np.isnan(pv)]
        return float(pv.mean()) if pv.size else float("nan")

    def grand_mean(self) -> float:
        vals = [self.condition_mean(c) for c in self.matrices]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def rank1_matrix(
    test: EmbeddingSet,
    split: SplitSpec,
    exclude_invalid: bool = False,
    distances: np.ndarray | None = None,
) -> ProtocolResult:
    """Rank-1 per (condition, probe view, gallery view).

    The gallery is the split's gallery condition set; for each cell the probe
    is matched against gallery sequences of that gallery view only, and the
    nearest one (lowest index on ties) decides. With ``exclude_invalid`` a
    probe whose subject has no gallery sequence in that view is skipped
    instead of counted as a miss.
    """
    keys = test.keys
    gallery_set = set(split.gallery)
    gal = np.array([i for i, k in enumerate(keys) if (k.condition, k.trial) in gallery_set], dtype=int)
    views = tuple(split.views)
    vidx = {v: i for i, v in enumerate(views)}
    gal_views = np.array([keys[i].view for i in gal])
    for v in views:
        if not (gal_views == v).any():
            raise ValueError(f"gallery has no sequences for view {v}")
    subjects = np.array([k.subject for k in keys])
    if distances is None:
        distances = pairwise_distances(test, test)
    matrices, counts = {}, {}
    for cond, rules in split.probes.items():
        rule_set = set(rules)
        probe = np.array([i for i, k in enumerate(keys) if (k.condition, k.trial) in rule_set], dtype=int)
        mat = np.full((len(views), len(views)), np.nan)
        cnt = np.zeros((len(views), len(views)), dtype=int)
        probe_views = np.array([keys[i].view for i in probe])
        for vp in views:
            pv = probe[probe_views == vp] if probe.size else probe
            for vg in views:
                if vg == vp:
                    continue
                gv = gal[gal_views == vg]
                rows = pv
                if exclude_invalid:
                    present = set(subjects[gv])
                    rows = np.array([i for i in pv if subjects[i] in present], dtype=int)
                if rows.size == 0:
                    log.warning("no probes for %s view %d vs gallery view %d; cell left absent", cond, vp, vg)
                    continue
                d = distances[np.ix_(rows, gv)]
                nearest = gv[np.argmin(d, axis=1)]
                mat[vidx[vp], vidx[vg]] = float(np.mean(subjects[nearest] == subjects[rows]))
                cnt[vidx[vp], vidx[vg]] = rows.size
        matrices[cond] = mat
        counts[cond] = cnt
    return ProtocolResult(views, matrices, counts)


# ---------------------------------------------------------------- reports


@dataclass
class ReportRow:
    split: str
    condition: str
    method: str
    per_view: tuple[float, ...]  # percent, NaN when absent
    mean: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReportRow):
            return NotImplemented
        same = lambda a, b: (np.isnan(a) and np.isnan(b)) or a == b  # noqa: E731
        return (
            (self.split, self.condition, self.method) == (other.split, other.condition, other.method)
            and len(self.per_view) == len(other.per_view)
            and all(same(a, b) for a, b in zip(self.per_view, other.per_view))
            and same(self.mean, other.mean)
        )


def condition_report(result: ProtocolResult, split: str = "", method: str = "") -> list[ReportRow]:
    """One row per condition: per-probe-view means in percent plus their mean."""
    rows = []
    for cond in result.matrices:
        pv = tuple(float(x) * 100.0 for x in result.per_view_mean(cond))
        rows.append(ReportRow(split, cond.upper(), method, pv, result.condition_mean(cond) * 100.0))
    return rows


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def _parse(s: str) -> float:
    return float("nan") if s == "" else float(s)


def report_to_csv(rows: Sequence[ReportRow], views: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "condition", "method", *[str(v) for v in views], "mean"])
    for r in rows:
        w.writerow([r.split, r.condition, r.method, *[_fmt(x) for x in r.per_view], _fmt(r.mean)])
    return buf.getvalue()


def report_from_csv(text: str) -> tuple[list[ReportRow], tuple[int, ...]]:
    body = "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))
    reader = csv.reader(io.StringIO(body))
    header = next(reader)
    views = tuple(int(v) for v in header[3:-1])
    rows = []
    for rec in reader:
        if not rec:
            continue
        rows.append(ReportRow(rec[0], rec[1], rec[2], tuple(_parse(x) for x in rec[3:-1]), _parse(rec[-1])))
    return rows, views


def report_to_text(rows: Sequence[ReportRow], views: Sequence[int]) -> str:
    header = ["split", "cond", "method", *[f"{v}" for v in views], "Mean"]
    body = [
        [r.split, r.condition, r.method, *["-" if np.isnan(x) else f"{x:.1f}" for x in r.per_view], "-" if np.isnan(r.mean) else f"{r.mean:.1f}"]
        for r in rows
    ]
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(line, widths)) for line in [header, *body]]
    return "\n".join(lines) + "\n"


def cells_to_csv(result: ProtocolResult, split: str = "") -> str:
    """Every (condition, probe view, gallery view) cell; excluded or absent cells have an empty rank1."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "condition", "probe_view", "gallery_view", "rank1"])
    for cond, mat in result.matrices.items():
        for i, vp in enumerate(result.views):
            for j, vg in enumerate(result.views):
                w.writerow([split, cond.upper(), vp, vg, "" if i == j else _fmt(mat[i, j])])
    return buf.getvalue()
