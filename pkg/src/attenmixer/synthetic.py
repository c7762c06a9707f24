"""Synthetic corpora with known structure, used by tests and the demo scripts."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import Session, SessionDataset, TrainingExample, Vocabulary, augment


def pattern_sessions(n_sessions=50, n_items=20, length=6) -> list[Session]:
    """Sessions walking the cycle 1 -> 2 -> ... -> n_items -> 1, one per start offset.

    The next item is a deterministic function of the last one.
    """
    out = []
    for k in range(n_sessions):
        items = tuple((k + i) % n_items + 1 for i in range(length))
        out.append(Session(items, f"s{k}", k))
    return out


def pattern_dataset(n_sessions=50, n_items=20, length=6) -> SessionDataset:
    """Toy dataset whose validation/test sets equal its training set (overfitting checks)."""
    sessions = pattern_sessions(n_sessions, n_items, length)
    examples = augment(sessions)
    vocab = Vocabulary([str(i) for i in range(1, n_items + 1)])
    return SessionDataset(examples, examples, examples, vocab, {"source": "pattern"})


def planted_pairs(n_rows=5, n_cols=40, n_train=3000, n_valid=600, n_test=600,
                  noise=(1, 4), seed=0) -> SessionDataset:
    """Grid corpus where the unordered pair of the last two clicks decides the target.

    Items ``1..n_rows`` are row cues, the next ``n_cols`` are column cues and
    the remaining ``n_rows*n_cols`` are targets. A prefix is some random cues
    followed by one row cue and one column cue in random order; the target is
    the grid cell of that pair. Neither the last click alone nor the whole
    session bag identifies the target.
    """
    rng = np.random.default_rng(seed)
    n_cues = n_rows + n_cols
    n_items = n_cues + n_rows * n_cols

    def draw(count, offset):
        examples = []
        for i in range(count):
            r = int(rng.integers(n_rows))
            c = int(rng.integers(n_cols))
            pair = [1 + r, 1 + n_rows + c]
            if rng.random() < 0.5:
                pair.reverse()
            k = int(rng.integers(noise[0], noise[1] + 1))
            filler = [int(x) for x in rng.integers(1, n_cues + 1, size=k)]
            target = 1 + n_cues + r * n_cols + c
            examples.append(TrainingExample(tuple(filler + pair), target, f"p{offset + i}", offset + i))
        return examples

    train = draw(n_train, 0)
    valid = draw(n_valid, n_train)
    test = draw(n_test, n_train + n_valid)
    vocab = Vocabulary([str(i) for i in range(1, n_items + 1)])
    return SessionDataset(train, valid, test, vocab, {"source": "planted-pairs", "seed": seed})


def write_events_csv(sessions, path, start_time=1_600_000_000, step=60) -> Path:
    """Write sessions of external ids as ``session_id,item_id,timestamp`` rows."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session_id", "item_id", "timestamp"])
        t = start_time
        for k, items in enumerate(sessions):
            for item in items:
                writer.writerow([f"s{k}", item, t])
                t += step
    return path
