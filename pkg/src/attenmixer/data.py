"""Session-log ingestion, filtering, temporal splitting, augmentation and batching.

Item index 0 is reserved for padding; real items are numbered 1..|V|.
Batches are right-padded, so the last real item of row ``b`` sits at column
``lengths[b] - 1``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import EmptyAfterFilter, EmptyInput, InvalidRule, ParseError

PAD = 0
WEEK_SECONDS = 7 * 24 * 3600
CACHE_FORMAT = "attenmixer-dataset"
CACHE_VERSION = 1


def _id_key(item_id: str):
    # numeric ids compare as integers so that "10" sorts after "9"
    return (0, int(item_id), "") if item_id.isdigit() else (1, 0, item_id)


@dataclass(frozen=True)
class RawSession:
    session_id: str
    items: tuple
    times: tuple

    @property
    def timestamp(self) -> int:
        return self.times[-1]

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class Session:
    items: tuple
    session_id: str = ""
    timestamp: int = 0

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class TrainingExample:
    prefix: tuple
    target: int
    session_id: str = ""
    timestamp: int = 0


@dataclass
class Vocabulary:
    """Bijection between external item ids and dense indices 1..|V|."""

    ids: list
    counts: list = field(default_factory=list)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        if not self.counts:
            self.counts = [0] * len(self.ids)
        self._index = {item: i + 1 for i, item in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate item ids in vocabulary")

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item_id):
        return str(item_id) in self._index

    def encode(self, item_id) -> int:
        return self._index[str(item_id)]

    def decode(self, index: int) -> str:
        if index < 1 or index > len(self.ids):
            raise KeyError(index)
        return self.ids[index - 1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(len(self.ids)).encode())
        for item in self.ids:
            h.update(b"\x00" + item.encode("utf-8"))
        return h.hexdigest()

    @classmethod
    def from_sessions(cls, sessions: Iterable[RawSession]) -> "Vocabulary":
        counts = Counter(item for s in sessions for item in s.items)
        ids = sorted(counts, key=_id_key)
        return cls(ids=ids, counts=[counts[i] for i in ids])


@dataclass
class SessionDataset:
    train: list
    validation: list
    test: list
    vocab: Vocabulary
    meta: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.vocab)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _parse_ts(raw: str, line: int) -> int:
    try:
        return int(raw)
    except ValueError:
        try:
            value = float(raw)
        except ValueError:
            raise ParseError(f"bad timestamp {raw!r}", line) from None
        if not math.isfinite(value):
            raise ParseError(f"bad timestamp {raw!r}", line)
        return int(value)


def load_events(path, format: str = "csv") -> list[RawSession]:
    """Read an event log and group it into raw sessions.

    ``csv``: header ``session_id,item_id,timestamp``.
    ``tsv``: ``user_id<TAB>item_id<TAB>timestamp`` (header optional); each
    user's whole stream becomes one raw session, to be cut by
    :func:`sessionize`.

    Events are ordered by timestamp within a session (stable for ties) and
    sessions are returned in order of first appearance in the file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    if format not in ("csv", "tsv"):
        raise ValueError(f"unknown input format {format!r}")
    groups: dict[str, list] = defaultdict(list)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="," if format == "csv" else "\t")
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                header = [c.strip().lower() for c in row]
                if format == "csv":
                    if header != ["session_id", "item_id", "timestamp"]:
                        raise ParseError("expected header session_id,item_id,timestamp", lineno)
                    continue
                if header == ["user_id", "item_id", "timestamp"]:
                    continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}: {row!r}", lineno)
            key, item, ts = (c.strip() for c in row)
            if not key or not item:
                raise ParseError(f"empty field in {row!r}", lineno)
            groups[key].append((_parse_ts(ts, lineno), lineno, item))
    if not groups:
        raise EmptyInput(f"no events in {path}")
    sessions = []
    for key, events in groups.items():
        events.sort(key=lambda e: (e[0], e[1]))
        sessions.append(RawSession(key, tuple(e[2] for e in events), tuple(e[0] for e in events)))
    return sessions


def sessionize(streams: Sequence[RawSession], gap_seconds: float) -> list[RawSession]:
    """Cut each user stream wherever consecutive events are more than ``gap_seconds`` apart."""
    out = []
    for stream in streams:
        start, part = 0, 0
        for i in range(1, len(stream.items) + 1):
            if i == len(stream.items) or stream.times[i] - stream.times[i - 1] > gap_seconds:
                out.append(RawSession(f"{stream.session_id}_{part}", stream.items[start:i], stream.times[start:i]))
                start, part = i, part + 1
    return out


# ---------------------------------------------------------------------------
# filtering and indexing
# ---------------------------------------------------------------------------

def filter_sessions(raw: Sequence[RawSession], min_session_len=2, min_item_freq=5,
                    top_k_items=0) -> list[RawSession]:
    """Drop rare items and short sessions repeatedly until nothing changes."""
    if min_session_len < 0 or min_item_freq < 0 or top_k_items < 0:
        raise ValueError("filter thresholds must be >= 0")
    sessions = list(raw)
    while True:
        counts = Counter(item for s in sessions for item in s.items)
        keep = {item for item, c in counts.items() if c >= min_item_freq}
        if top_k_items:
            ranked = sorted(counts, key=lambda i: (-counts[i], _id_key(i)))
            keep &= set(ranked[:top_k_items])
        changed = False
        next_sessions = []
        for s in sessions:
            kept = [(item, t) for item, t in zip(s.items, s.times) if item in keep]
            if len(kept) != len(s.items):
                changed = True
            if len(kept) < max(min_session_len, 1):
                changed = True
                continue
            next_sessions.append(RawSession(s.session_id, tuple(k[0] for k in kept), tuple(k[1] for k in kept)))
        sessions = next_sessions
        if not changed:
            break
    if not sessions:
        raise EmptyAfterFilter("no sessions survive filtering")
    return sessions


def encode_sessions(raw: Sequence[RawSession], vocab: Vocabulary) -> list[Session]:
    return [Session(tuple(vocab.encode(i) for i in s.items), s.session_id, s.timestamp) for s in raw]


def filter_and_index(raw, min_session_len=2, min_item_freq=5, top_k_items=0):
    """Filter to a fixpoint, then index the surviving items densely from 1."""
    kept = filter_sessions(raw, min_session_len, min_item_freq, top_k_items)
    vocab = Vocabulary.from_sessions(kept)
    return encode_sessions(kept, vocab), vocab


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

class EmptySplit(InvalidRule):
    pass


@dataclass(frozen=True)
class SplitRule:
    """``last-week``, ``last-fraction`` or ``interval`` (sessionize, then last-fraction)."""

    kind: str = "last-fraction"
    fraction: float = 0.2
    gap_seconds: float = 0.0

    def __post_init__(self):
        if self.kind not in ("last-week", "last-fraction", "interval"):
            raise InvalidRule(f"unknown split rule {self.kind!r}")
        if self.kind != "last-week" and not 0.0 < self.fraction < 1.0:
            raise InvalidRule("split fraction must lie in (0, 1)")
        if self.kind == "interval" and self.gap_seconds <= 0:
            raise InvalidRule("interval rule needs a positive gap")

    @classmethod
    def parse(cls, text: str) -> "SplitRule":
        """Parse ``last-week``, ``last-fraction:0.2`` or ``interval:8h:0.2``."""
        parts = text.strip().split(":")
        try:
            if parts[0] == "last-week" and len(parts) == 1:
                return cls("last-week")
            if parts[0] == "last-fraction" and len(parts) <= 2:
                return cls("last-fraction", float(parts[1]) if len(parts) == 2 else 0.2)
            if parts[0] == "interval" and len(parts) in (2, 3):
                frac = float(parts[2]) if len(parts) == 3 else 0.2
                return cls("interval", frac, parse_duration(parts[1]))
        except ValueError as exc:
            raise InvalidRule(f"bad split rule {text!r}: {exc}") from None
        raise InvalidRule(f"bad split rule {text!r}")


def parse_duration(text: str) -> float:
    units = {"s": 1, "m": 60, "h": 3600, "d": 86400}
    text = text.strip()
    if text and text[-1] in units:
        return float(text[:-1]) * units[text[-1]]
    return float(text)


def temporal_split(sessions: Sequence, rule: SplitRule | str):
    """Split sessions so that every test session ends no earlier than any train session.

    Sessions are ordered by end timestamp (ties keep input order).
    """
    if isinstance(rule, str):
        rule = SplitRule.parse(rule)
    if rule.kind == "interval":
        sessions = sessionize(sessions, rule.gap_seconds)
    ordered = sorted(sessions, key=lambda s: s.timestamp)
    if not ordered:
        raise EmptySplit("nothing to split")
    if rule.kind == "last-week":
        cutoff = ordered[-1].timestamp - WEEK_SECONDS
        train = [s for s in ordered if s.timestamp <= cutoff]
        test = [s for s in ordered if s.timestamp > cutoff]
    else:
        n_test = int(len(ordered) * rule.fraction + 0.5)
        train, test = ordered[: len(ordered) - n_test], ordered[len(ordered) - n_test:]
    if not train or not test:
        raise EmptySplit(f"rule {rule.kind} gives {len(train)} train / {len(test)} test sessions")
    return train, test


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------

def augment(sessions: Iterable[Session]) -> list[TrainingExample]:
    """Prefix expansion: [v1..vn] gives ([v1..vk], v(k+1)) for k = 1..n-1."""
    out = []
    for s in sessions:
        if len(s.items) < 2:
            raise ValueError(f"session {s.session_id!r} is shorter than 2")
        for k in range(1, len(s.items)):
            out.append(TrainingExample(tuple(s.items[:k]), s.items[k], s.session_id, s.timestamp))
    return out


def holdout_validation(train: Sequence[TrainingExample], fraction=0.2):
    """Split off the temporally last ``fraction`` of training examples."""
    ordered = sorted(train, key=lambda e: e.timestamp)
    n_val = int(len(ordered) * fraction + 0.5)
    return ordered[: len(ordered) - n_val], ordered[len(ordered) - n_val:]


@dataclass(frozen=True)
class Batch:
    items: np.ndarray    # (B, n) int, right-padded with PAD
    mask: np.ndarray     # (B, n) bool
    lengths: np.ndarray  # (B,)
    targets: np.ndarray  # (B,)

    def __len__(self):
        return len(self.lengths)


def make_batch(prefixes: Sequence[Sequence[int]], targets: Sequence[int] | None = None) -> Batch:
    lengths = np.array([len(p) for p in prefixes], dtype=np.intp)
    if np.any(lengths < 1):
        raise ValueError("empty prefix")
    width = int(lengths.max())
    items = np.full((len(prefixes), width), PAD, dtype=np.intp)
    for row, prefix in enumerate(prefixes):
        items[row, : len(prefix)] = prefix
    mask = np.arange(width)[None, :] < lengths[:, None]
    if targets is None:
        targets = np.zeros(len(prefixes), dtype=np.intp)
    return Batch(items, mask, lengths, np.asarray(targets, dtype=np.intp))


def batch_iter(examples: Sequence[TrainingExample], batch_size: int,
               shuffle_seed: int | None = None) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        yield make_batch([e.prefix for e in chunk], [e.target for e in chunk])


# ---------------------------------------------------------------------------
# end-to-end preparation and the cache file
# ---------------------------------------------------------------------------

def prepare_dataset(raw: Sequence[RawSession], *, min_session_len=2, min_item_freq=5, top_k_items=0,
                    split: SplitRule | str = "last-fraction:0.2", validation_fraction=0.2,
                    source="") -> SessionDataset:
    """load -> (sessionize) -> filter -> split -> restrict test to train items -> augment."""
    rule = SplitRule.parse(split) if isinstance(split, str) else split
    if rule.kind == "interval":
        raw = sessionize(raw, rule.gap_seconds)
        rule = SplitRule("last-fraction", rule.fraction)
    kept = filter_sessions(raw, min_session_len, min_item_freq, top_k_items)
    train_raw, test_raw = temporal_split(kept, rule)
    vocab = Vocabulary.from_sessions(train_raw)
    dropped_items = 0
    test_clean = []
    for s in test_raw:
        pairs = [(i, t) for i, t in zip(s.items, s.times) if i in vocab]
        dropped_items += len(s.items) - len(pairs)
        if len(pairs) >= 2:
            test_clean.append(RawSession(s.session_id, tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)))
    train_sessions = encode_sessions(train_raw, vocab)
    test_sessions = encode_sessions(test_clean, vocab)
    train_examples, val_examples = holdout_validation(augment(train_sessions), validation_fraction)
    test_examples = augment(test_sessions)
    all_sessions = train_sessions + test_sessions
    meta = {
        "source": str(source),
        "filter": {"min_session_len": min_session_len, "min_item_freq": min_item_freq,
                   "top_k_items": top_k_items},
        "split": {"kind": rule.kind, "fraction": rule.fraction, "gap_seconds": rule.gap_seconds},
        "validation_fraction": validation_fraction,
        "test_events_dropped_unseen_items": dropped_items,
        "test_sessions_dropped": len(test_raw) - len(test_clean),
        "stats": session_stats(all_sessions, len(vocab), len(train_examples) + len(val_examples) + len(test_examples)),
    }
    return SessionDataset(train_examples, val_examples, test_examples, vocab, meta)


def session_stats(sessions: Sequence[Session], n_items: int, n_examples: int) -> dict:
    """Counts in the layout of a dataset-statistics table."""
    clicks = sum(len(s) for s in sessions)
    return {
        "clicks": clicks,
        "sessions": len(sessions),
        "examples": n_examples,
        "items": n_items,
        "average_length": clicks / len(sessions) if sessions else 0.0,
    }


def _examples_to_json(examples):
    return [[e.timestamp, e.target, *e.prefix] for e in examples]


def _examples_from_json(rows):
    return [TrainingExample(tuple(r[2:]), r[1], "", r[0]) for r in rows]


def save_dataset(ds: SessionDataset, path, config: dict | None = None) -> None:
    """Write the prepared-dataset cache.

    JSON object with keys ``format``, ``version``, ``vocabulary`` (``ids``,
    ``counts``, ``digest``), ``train``/``validation``/``test`` (each a list of
    ``[timestamp, target, *prefix]`` rows), ``meta`` and ``config``. Output is
    byte-for-byte deterministic.
    """
    doc = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "vocabulary": {"ids": ds.vocab.ids, "counts": ds.vocab.counts, "digest": ds.vocab.digest()},
        "train": _examples_to_json(ds.train),
        "validation": _examples_to_json(ds.validation),
        "test": _examples_to_json(ds.test),
        "meta": ds.meta,
        "config": config if config is not None else ds.config,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_dataset(path) -> SessionDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset cache not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"dataset cache is not valid JSON: {exc}") from None
    if doc.get("format") != CACHE_FORMAT or doc.get("version") != CACHE_VERSION:
        raise ParseError(f"{path} is not a version-{CACHE_VERSION} dataset cache")
    vocab = Vocabulary(doc["vocabulary"]["ids"], doc["vocabulary"]["counts"])
    return SessionDataset(
        _examples_from_json(doc["train"]),
        _examples_from_json(doc["validation"]),
        _examples_from_json(doc["test"]),
        vocab,
        doc.get("meta", {}),
        doc.get("config", {}),
    )
