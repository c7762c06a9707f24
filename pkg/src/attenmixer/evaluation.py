"""Rank-based metrics: HR@K, MRR@K and session-length buckets."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model
from .data import batch_iter
from .errors import EmptyRanks, InvalidTarget

DEFAULT_CUTOFFS = (5, 10, 20)
DEFAULT_BUCKETS = ((1, 3), (4, 6), (7, None))


def rank_of_target(probs, target: int) -> int:
    """1-based rank of ``target`` (item index 1..V) by descending probability.

    Ties go to the smaller item index.
    """
    probs = np.asarray(probs)
    if not 1 <= target <= probs.shape[-1]:
        raise InvalidTarget(f"target {target} outside 1..{probs.shape[-1]}")
    return int(ranks_of_targets(probs[None, :], [target])[0])


def ranks_of_targets(scores, targets) -> np.ndarray:
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.intp)
    if np.any(targets < 1) or np.any(targets > scores.shape[1]):
        raise InvalidTarget("target outside 1..V")
    t = scores[np.arange(len(targets)), targets - 1][:, None]
    cols = np.arange(1, scores.shape[1] + 1)[None, :]
    ahead = (scores > t) | ((scores == t) & (cols < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def hr_mrr(ranks: Sequence[int], k: int) -> tuple[float, float]:
    if k < 1:
        raise ValueError("cutoff must be >= 1")
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise EmptyRanks("no ranks to summarise")
    hit = ranks <= k
    return float(hit.mean()), float(np.where(hit, 1.0 / ranks, 0.0).mean())


def bucket_label(bucket) -> str:
    lo, hi = bucket
    return f"{lo}+" if hi is None else f"{lo}-{hi}"


def parse_buckets(text: str):
    """``"1-3,4-6,7+"`` -> ((1, 3), (4, 6), (7, None))."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if part.endswith("+"):
            out.append((int(part[:-1]), None))
        else:
            lo, hi = part.split("-")
            out.append((int(lo), int(hi)))
    return tuple(out)


@dataclass
class MetricsReport:
    cutoffs: tuple
    hr: dict
    mrr: dict
    count: int
    buckets: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "seconds": self.seconds,
            "metrics": {f"HR@{k}": self.hr[k] for k in self.cutoffs}
            | {f"MRR@{k}": self.mrr[k] for k in self.cutoffs},
            "buckets": self.buckets,
        }

    def write(self, path, extra: dict | None = None) -> None:
        """JSON report: ``count``, ``seconds``, ``metrics`` (``HR@K``/``MRR@K``),
        ``buckets`` (label -> count/metrics) plus any ``extra`` keys."""
        doc = self.to_dict() | (extra or {})
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_bucket_table(self, path) -> None:
        header = ["bucket", "count"] + [f"HR@{k}" for k in self.cutoffs] + [f"MRR@{k}" for k in self.cutoffs]
        lines = ["\t".join(header)]
        for label, entry in self.buckets.items():
            row = [label, str(entry["count"])]
            row += [f"{entry['metrics'].get(f'HR@{k}', float('nan')):.6f}" for k in self.cutoffs]
            row += [f"{entry['metrics'].get(f'MRR@{k}', float('nan')):.6f}" for k in self.cutoffs]
            lines.append("\t".join(row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def report_from_ranks(ranks, lengths, cutoffs=DEFAULT_CUTOFFS, buckets=DEFAULT_BUCKETS,
                      seconds=0.0) -> MetricsReport:
    ranks = np.asarray(ranks)
    lengths = np.asarray(lengths)
    cutoffs = tuple(sorted(cutoffs))
    hr, mrr = {}, {}
    for k in cutoffs:
        hr[k], mrr[k] = hr_mrr(ranks, k)
    per_bucket = {}
    for bucket in buckets:
        lo, hi = bucket
        sel = (lengths >= lo) & (lengths <= (hi if hi is not None else np.inf))
        entry = {"count": int(sel.sum()), "metrics": {}}
        if sel.any():
            for k in cutoffs:
                h, m = hr_mrr(ranks[sel], k)
                entry["metrics"][f"HR@{k}"] = h
                entry["metrics"][f"MRR@{k}"] = m
        per_bucket[bucket_label(bucket)] = entry
    return MetricsReport(cutoffs, hr, mrr, len(ranks), per_bucket, seconds)


def collect_ranks(scorer: Callable, examples, batch_size=500):
    """Ranks and prefix lengths for ``scorer(batch) -> (B, V) scores``."""
    ranks, lengths = [], []
    for batch in batch_iter(examples, batch_size):
        ranks.append(ranks_of_targets(scorer(batch), batch.targets))
        lengths.append(batch.lengths)
    if not ranks:
        raise EmptyRanks("no examples to evaluate")
    return np.concatenate(ranks), np.concatenate(lengths)


def model_scorer(params, hyper, encoder=None):
    # logits are enough: ranking is invariant to the softmax scale
    return lambda batch: model.logits(params, hyper, batch, encoder).data


def evaluate_scorer(scorer, examples, cutoffs=DEFAULT_CUTOFFS, buckets=DEFAULT_BUCKETS,
                    batch_size=500) -> MetricsReport:
    start = time.perf_counter()
    ranks, lengths = collect_ranks(scorer, examples, batch_size)
    return report_from_ranks(ranks, lengths, cutoffs, buckets, time.perf_counter() - start)


def evaluate(checkpoint, examples, cutoffs=DEFAULT_CUTOFFS, buckets=DEFAULT_BUCKETS,
             batch_size=500, encoder=None) -> MetricsReport:
    """Metrics of a frozen checkpoint (anything with ``params`` and ``hyper``)."""
    return evaluate_scorer(model_scorer(checkpoint.params, checkpoint.hyper, encoder),
                           examples, cutoffs, buckets, batch_size)
