"""Atten-Mixer: multi-level intent queries, multi-head attention and Lp attention mixing.

Everything here works on right-padded batches (see :mod:`attenmixer.data`).
Shapes used throughout::

    B  batch size          n  padded prefix width
    d  embedding size      Lv number of query levels (1 for variant M)
    H  attention heads     V  vocabulary size (padding excluded)

Internally the attention map is kept as ``(B, H, Lv, n)``;
:func:`attention_matrix` converts one example to the level-major
``n x (l_eff*H)`` layout (column ``m*H + h``).

Parameters are a plain ``dict`` of arrays (or tensors while differentiating):

``embedding``    (V+1, d), row 0 is padding
``query_<l>``    (d, d) for l = 1..Lv; (d, l*d) for variant LI
``head_query``   (H, d, d)
``head_key``     (H, d, d)
``merge``        (d, H*d + d)

Projections follow the column-vector convention ``W x`` for ``query_<l>``
and ``merge``, and the row convention ``x W`` for the attention heads.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from .data import Batch, make_batch
from .numerics import Tensor

VARIANTS = ("full", "M", "IP", "LI", "LP")

Encoder = Callable[[Tensor], Tensor]
# linear(name, x, matrix, transposed) -> x @ matrix
Linear = Callable[[str, Tensor, Tensor, bool], Tensor]


@dataclass(frozen=True)
class HyperParams:
    d: int = 256
    L: int = 3
    H: int = 4
    sigma: float = 12.0
    p: float = 4.0
    variant: str = "full"

    def __post_init__(self):
        if self.d < 1 or self.L < 1 or self.H < 1:
            raise ValueError("d, L and H must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def levels(self) -> int:
        return 1 if self.variant == "M" else self.L

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(n_items: int, hyper: HyperParams) -> dict:
    d, H = hyper.d, hyper.H
    shapes = {"embedding": (n_items + 1, d)}
    for level in range(1, hyper.levels + 1):
        shapes[f"query_{level}"] = (d, level * d) if hyper.variant == "LI" else (d, d)
    shapes["head_query"] = (H, d, d)
    shapes["head_key"] = (H, d, d)
    shapes["merge"] = (d, H * d + d)
    return shapes


def init_params(n_items: int, hyper: HyperParams, seed: int) -> dict:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) for every weight, padding row included."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(hyper.d)
    return {name: rng.uniform(-bound, bound, size=shape)
            for name, shape in param_shapes(n_items, hyper).items()}


def _project(x, weight, name, transposed, linear):
    matrix = nx.swapaxes(weight) if transposed else weight
    if linear is None:
        return nx.matmul(x, matrix)
    return linear(name, x, matrix, transposed)


def _as_batch(prefixes) -> Batch:
    if isinstance(prefixes, Batch):
        return prefixes
    return make_batch(prefixes)


# ---------------------------------------------------------------------------
# readout stages
# ---------------------------------------------------------------------------

def embed_normalize(items, params: Mapping, encoder: Encoder | None = None) -> Tensor:
    """Gather embeddings for an index array of any shape and normalise each row."""
    rows = nx.gather_rows(params["embedding"], np.asarray(items, dtype=np.intp))
    if encoder is not None:
        rows = encoder(rows)
    return nx.l2_normalize(rows, axis=-1)


def _window_matrix(lengths, width, levels, variant):
    j = np.arange(width)[None, None, :]
    end = lengths[:, None, None]
    if variant == "IP":
        win = j < end
        win = np.broadcast_to(win, (len(lengths), levels, width))
    else:
        size = np.arange(1, levels + 1)[None, :, None]
        win = (j < end) & (j >= end - size)
    return win.astype(np.float64)


def level_mask(lengths, levels) -> np.ndarray:
    """(B, Lv) indicator of levels l <= min(L, n)."""
    return (np.arange(1, levels + 1)[None, :] <= np.asarray(lengths)[:, None]).astype(np.float64)


def generate_queries(K: Tensor, lengths, params: Mapping, hyper: HyperParams,
                     linear: Linear | None = None) -> Tensor:
    """Build the (B, Lv, d) query stack; levels beyond the prefix length are garbage
    and must be discarded with :func:`level_mask`."""
    K = nx.as_tensor(K)
    lengths = np.asarray(lengths, dtype=np.intp)
    B, width, d = K.shape
    levels = hyper.levels
    queries = []
    if hyper.variant == "LI":
        for level in range(1, levels + 1):
            pos = lengths[:, None] - level + np.arange(level)[None, :]
            valid = (pos >= 0).astype(np.float64)[:, :, None]
            rows = nx.index(K, (np.arange(B)[:, None], np.clip(pos, 0, None)))
            flat = nx.reshape(nx.mul(rows, valid), (B, level * d))
            queries.append(_project(flat, params[f"query_{level}"], f"query_{level}", True, linear))
    else:
        sums = nx.matmul(_window_matrix(lengths, width, levels, hyper.variant), K)
        for level in range(1, levels + 1):
            group = nx.index(sums, (slice(None), level - 1))
            queries.append(_project(group, params[f"query_{level}"], f"query_{level}", True, linear))
    return nx.stack(queries, axis=1)


def attention_heads(Q: Tensor, K: Tensor, mask, lengths, params: Mapping, hyper: HyperParams,
                    linear: Linear | None = None) -> Tensor:
    """Per-head softmax over session items; returns alpha of shape (B, H, Lv, n).

    Padded keys and levels beyond ``min(L, n)`` are exactly zero.
    """
    Q, K = nx.as_tensor(Q), nx.as_tensor(K)
    B, levels, d = Q.shape
    width = K.shape[1]
    qh = _project(nx.reshape(Q, (B, 1, levels, d)), params["head_query"], "head_query", False, linear)
    kh = _project(nx.reshape(K, (B, 1, width, d)), params["head_key"], "head_key", False, linear)
    logits = nx.mul(nx.matmul(qh, nx.swapaxes(kh)), 1.0 / math.sqrt(hyper.d))
    alpha = nx.softmax(logits, mask=np.asarray(mask, dtype=bool)[:, None, None, :])
    return nx.mul(alpha, level_mask(lengths, levels)[:, None, :, None])


def mix_and_embed(alpha: Tensor, K: Tensor, hyper: HyperParams) -> Tensor:
    """Pool attention over levels, aggregate items per head, concatenate heads, normalise.

    Returns the unit session embedding of shape (B, H*d).
    """
    alpha, K = nx.as_tensor(alpha), nx.as_tensor(K)
    B, H, _, width = alpha.shape
    d = K.shape[-1]
    if hyper.variant == "LP":
        pooled = nx.max_pool(alpha, axis=2)
    else:
        pooled = nx.lp_pool(alpha, hyper.p, axis=2)
    per_head = nx.matmul(nx.reshape(pooled, (B, H, 1, width)), nx.reshape(K, (B, 1, width, d)))
    return nx.l2_normalize(nx.reshape(per_head, (B, H * d)), axis=-1)


def last_item(K: Tensor, lengths) -> Tensor:
    lengths = np.asarray(lengths, dtype=np.intp)
    return nx.index(K, (np.arange(len(lengths)), lengths - 1))


def candidate_table(params: Mapping, encoder: Encoder | None = None) -> Tensor:
    """Normalised embeddings of the real items 1..V (padding excluded)."""
    return embed_normalize(np.arange(1, params["embedding"].shape[0]), params, encoder)


def score_logits(s_tilde: Tensor, h_last: Tensor, params: Mapping, candidates: Tensor,
                 linear: Linear | None = None) -> Tensor:
    """Unscaled preference scores z (B, V) for every real item."""
    merged = _project(nx.concat([s_tilde, h_last], axis=-1), params["merge"], "merge", True, linear)
    return nx.matmul(merged, nx.swapaxes(candidates))


def score(s_tilde, h_last, params: Mapping, sigma: float, encoder: Encoder | None = None) -> Tensor:
    """Probability distribution over the V real items."""
    z = score_logits(nx.as_tensor(s_tilde), nx.as_tensor(h_last), params, candidate_table(params, encoder))
    return nx.softmax(z, scale=sigma, axis=-1)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

@dataclass
class Readout:
    K: Tensor          # (B, n, d)
    queries: Tensor    # (B, Lv, d)
    alpha: Tensor      # (B, H, Lv, n)
    session: Tensor    # (B, H*d), unit rows
    last: Tensor       # (B, d), unit rows


def readout(params: Mapping, hyper: HyperParams, batch, encoder: Encoder | None = None,
            linear: Linear | None = None) -> Readout:
    """Everything up to (not including) scoring against the vocabulary."""
    batch = _as_batch(batch)
    K = embed_normalize(batch.items, params, encoder)
    Q = generate_queries(K, batch.lengths, params, hyper, linear)
    alpha = attention_heads(Q, K, batch.mask, batch.lengths, params, hyper, linear)
    s = mix_and_embed(alpha, K, hyper)
    return Readout(K, Q, alpha, s, last_item(K, batch.lengths))


def logits(params: Mapping, hyper: HyperParams, batch, encoder: Encoder | None = None,
           linear: Linear | None = None) -> Tensor:
    r = readout(params, hyper, batch, encoder, linear)
    return score_logits(r.session, r.last, params, candidate_table(params, encoder), linear)


def forward(prefix, params: Mapping, hyper: HyperParams, encoder: Encoder | None = None) -> np.ndarray:
    """Next-item distribution(s).

    ``prefix`` is a single sequence of item indices (returns shape (V,)), a
    list of sequences, or a :class:`Batch` (both return shape (B, V)).
    """
    single = not isinstance(prefix, Batch) and np.ndim(prefix[0]) == 0
    batch = make_batch([prefix]) if single else _as_batch(prefix)
    z = logits(params, hyper, batch, encoder)
    probs = nx.softmax(z, scale=hyper.sigma, axis=-1).data
    return probs[0] if single else probs


def batch_loss(params: Mapping, hyper: HyperParams, batch: Batch, encoder: Encoder | None = None,
               linear: Linear | None = None) -> Tensor:
    """Mean cross-entropy of the batch targets (item indices 1..V)."""
    z = logits(params, hyper, batch, encoder, linear)
    return nx.softmax_cross_entropy(z, batch.targets - 1, scale=hyper.sigma)


def attention_matrix(alpha, row: int, length: int, hyper: HyperParams) -> np.ndarray:
    """Level-major ``n x (l_eff*H)`` attention map of one batch row."""
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha)[row]
    l_eff = min(hyper.levels, length)
    block = a[:, :l_eff, :length]                       # (H, l_eff, n)
    return np.transpose(block, (2, 1, 0)).reshape(length, l_eff * a.shape[0])


def query_matrix(queries, row: int, length: int, hyper: HyperParams) -> np.ndarray:
    """The ``l_eff x d`` query stack of one batch row."""
    q = np.asarray(queries.data if isinstance(queries, Tensor) else queries)[row]
    return q[: min(hyper.levels, length)]
