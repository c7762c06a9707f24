"""Cross-entropy objective, Adam, and the epoch loop with validation-based selection."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import model
from . import numerics as nx
from .checkpoint import Checkpoint
from .data import SessionDataset, batch_iter
from .errors import InvalidTarget, NonFiniteError, NonFiniteUpdate
from .evaluation import collect_ranks, hr_mrr, model_scorer

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-30


def cross_entropy(probs, target: int) -> float:
    """``-log(probs[target])`` for an item index 1..V, probability floored at 1e-30."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 1 <= target <= probs.shape[-1]:
        raise InvalidTarget(f"target {target} outside 1..{probs.shape[-1]}")
    return -math.log(max(float(probs[target - 1]), PROB_FLOOR))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, lr, beta1, beta2, eps)


def adam_step(params: dict, grads, state: OptimizerState):
    """One bias-corrected Adam update; returns new (params, state) without mutating inputs."""
    grads = getattr(grads, "grads", grads)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {value.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        with np.errstate(invalid="ignore", over="ignore"):
            updated = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.all(np.isfinite(updated)):
            raise NonFiniteUpdate(f"non-finite update for {name!r}")
        new_params[name], new_m[name], new_v[name] = updated, m, v
    return new_params, OptimizerState(new_m, new_v, t, state.lr, b1, b2, state.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 100
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


def validation_metrics(params, hyper, examples, k=20) -> tuple[float, float]:
    ranks, _ = collect_ranks(model_scorer(params, hyper), examples)
    return hr_mrr(ranks, k)


def train_epoch(params, state, hyper, examples, batch_size, shuffle_seed, weight_decay=0.0,
                loss_fn=None, epoch=0):
    """One pass over ``examples``; returns (params, state, mean batch loss)."""
    if loss_fn is None:
        loss_fn = lambda p, batch: model.batch_loss(p, hyper, batch)
    total, count = 0.0, 0
    for batch_id, batch in enumerate(batch_iter(examples, batch_size, shuffle_seed)):
        try:
            rec = nx.grad(loss_fn, params, (batch,))
            grads = rec.grads
            if weight_decay:
                grads = {k: g + weight_decay * params[k] for k, g in grads.items()}
            params, state = adam_step(params, grads, state)
        except NonFiniteError as exc:
            raise type(exc)(f"epoch {epoch} batch {batch_id}: {exc}") from exc
        total += rec.loss
        count += 1
    return params, state, total / max(count, 1)


def fit(dataset: SessionDataset, hyper: model.HyperParams, config: TrainConfig,
        log_path=None, init=None, extra_meta=None):
    """Train with Adam; keep the parameters with the best validation MRR@20.

    Returns ``(checkpoint, log_records)``. Each record holds ``epoch``,
    ``loss``, ``HR@20``, ``MRR@20``, ``train_seconds`` and ``eval_seconds``;
    when ``log_path`` is given every record is also appended to it as a JSON
    line.
    """
    if not dataset.train or not dataset.validation:
        raise ValueError("fit needs nonempty train and validation splits")
    params = init if init is not None else model.init_params(dataset.n_items, hyper, config.seed)
    state = OptimizerState.fresh(params, lr=config.lr)
    records = []
    best, best_params, best_epoch, stale = -math.inf, params, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        params, state, loss = train_epoch(params, state, hyper, dataset.train, config.batch_size,
                                          [config.seed, epoch], config.weight_decay, epoch=epoch)
        t1 = time.perf_counter()
        hr, mrr = validation_metrics(params, hyper, dataset.validation)
        record = {"epoch": epoch, "loss": loss, "HR@20": hr, "MRR@20": mrr,
                  "train_seconds": t1 - t0, "eval_seconds": time.perf_counter() - t1}
        records.append(record)
        log.info("epoch %d loss %.5f HR@20 %.4f MRR@20 %.4f", epoch, loss, hr, mrr)
        if log_path is not None:
            with Path(log_path).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if mrr > best:
            best, best_params, best_epoch, stale = mrr, params, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    meta = {"epoch": best_epoch, "validation_MRR@20": best, "seed": config.seed,
            "train_config": asdict(config)} | (extra_meta or {})
    ckpt = Checkpoint(hyper, best_params, dataset.n_items, dataset.vocab.digest(), meta)
    return ckpt, records
