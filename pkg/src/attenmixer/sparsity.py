"""Sparse-variational-dropout probe on the readout weights.

Selected weight matrices get a factorised Gaussian posterior N(theta, sigma^2)
and are used through the local reparameterisation trick. Training adds
``lam * KL(q || N(0, 1))`` to the cross-entropy; the share of mean weights
above a magnitude threshold (the density ratio) is recorded every epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model
from . import numerics as nx
from .data import SessionDataset
from .training import OptimizerState, TrainConfig, adam_step, train_epoch

LOGVAR_MIN = -60.0   # at or below this the variance is taken as exactly 0
LOGVAR_MAX = 10.0
INIT_LOGVAR = math.log(1e-4)
PROBE_DEFAULT = ("merge", "head_query", "head_key")


@dataclass
class VariationalWeight:
    mean: np.ndarray
    logvar: np.ndarray

    @classmethod
    def around(cls, mean, variance=1e-4) -> "VariationalWeight":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.full(mean.shape, math.log(variance)))

    @property
    def variance(self) -> np.ndarray:
        return variance(self.logvar)


def variance(logvar) -> np.ndarray:
    logvar = np.asarray(logvar, dtype=np.float64)
    return np.where(logvar <= LOGVAR_MIN, 0.0, np.exp(np.minimum(logvar, LOGVAR_MAX)))


def variational_forward(a, vw: VariationalWeight, noise_seed) -> np.ndarray:
    """One sample of the pre-activations ``a @ W`` with ``W ~ q``.

    Mean ``a @ theta``, variance ``(a*a) @ sigma^2``, drawn per output entry.
    """
    a = np.asarray(a, dtype=np.float64)
    gamma = a @ vw.mean
    delta = (a * a) @ vw.variance
    eps = np.random.default_rng(noise_seed).standard_normal(gamma.shape)
    return gamma + np.sqrt(delta) * eps


def kl_regularizer(vw: VariationalWeight) -> float:
    """Sum over entries of KL(N(theta, sigma^2) || N(0, 1))."""
    lv = np.clip(np.asarray(vw.logvar, dtype=np.float64), LOGVAR_MIN, LOGVAR_MAX)
    return float(0.5 * np.sum(np.exp(lv) + vw.mean**2 - 1.0 - lv))


def _kl_tensor(mean, logvar):
    return nx.mul(nx.tsum(nx.sub(nx.add(nx.exp(logvar), nx.mul(mean, mean)), nx.add(logvar, 1.0))), 0.5)


def density_ratio(W, threshold: float) -> float:
    """Fraction of entries with ``|w| > threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    W = np.asarray(W)
    return float(np.count_nonzero(np.abs(W) > threshold)) / W.size


def _as_matrix(w):
    w = np.asarray(w)
    return w.reshape(-1, w.shape[-1]) if w.ndim != 2 else w


@dataclass
class ProbeConfig:
    lam: float = 0.0
    threshold: float = 0.01
    matrices: tuple = PROBE_DEFAULT
    epochs: int = 10
    noise_dims: int = 0

    def __post_init__(self):
        self.matrices = tuple(self.matrices)
        if self.lam < 0 or self.threshold <= 0 or self.epochs < 1 or self.noise_dims < 0:
            raise ValueError("invalid probe configuration")
        if self.noise_dims and "merge" not in self.matrices:
            raise ValueError("noise_dims needs 'merge' among the probed matrices")


@dataclass
class DensityReport:
    threshold: float
    records: list = field(default_factory=list)  # dicts: epoch, name, M, N, threshold, rho

    def series(self, name) -> list:
        return [r["rho"] for r in self.records if r["name"] == name]

    def write(self, path, header_comment: str | None = None) -> None:
        """Tab-separated ``epoch name M N threshold rho`` lines after one header line.

        An optional ``# ...`` comment line (provenance) may precede the header.
        """
        lines = []
        if header_comment:
            lines.append("# " + header_comment.replace("\n", " "))
        lines.append("epoch\tname\tM\tN\tthreshold\trho")
        for r in self.records:
            lines.append(f"{r['epoch']}\t{r['name']}\t{r['M']}\t{r['N']}\t{r['threshold']!r}\t{r['rho']!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DensityReport":
        records = []
        threshold = 0.0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#") or line.startswith("epoch\t"):
                continue
            epoch, name, m, n, thr, rho = line.split("\t")
            threshold = float(thr)
            records.append({"epoch": int(epoch), "name": name, "M": int(m), "N": int(n),
                            "threshold": threshold, "rho": float(rho)})
        return cls(threshold, records)


class _VariationalLinear:
    """Linear hook for :mod:`attenmixer.model` that samples probed projections."""

    def __init__(self, tensors, probed, noise_dims, rng):
        self.tensors = tensors
        self.probed = probed
        self.noise_dims = noise_dims
        self.rng = rng

    def __call__(self, name, x, matrix, transposed):
        if name not in self.probed:
            return nx.matmul(x, matrix)
        logvar = self.tensors[f"{name}.logvar"]
        var = nx.exp(logvar)
        var = nx.swapaxes(var) if transposed else var
        if name == "merge" and self.noise_dims:
            noise = self.rng.standard_normal(x.shape[:-1] + (self.noise_dims,))
            x = nx.concat([x, noise], axis=-1)
            matrix = nx.concat([matrix, nx.swapaxes(self.tensors["merge.noise"])], axis=-2)
            var = nx.concat([var, nx.swapaxes(nx.exp(self.tensors["merge.noise.logvar"]))], axis=-2)
        gamma = nx.matmul(x, matrix)
        delta = nx.matmul(nx.mul(x, x), var)
        eps = self.rng.standard_normal(gamma.shape)
        return nx.add(gamma, nx.mul(nx.sqrt(delta), eps))


def probe_run(dataset: SessionDataset, hyper: model.HyperParams, probe: ProbeConfig,
              train: TrainConfig | None = None) -> DensityReport:
    """Train with variational probed weights and track their density ratios.

    Epoch 0 in the report is the initialisation. With ``noise_dims > 0`` a
    block of standard-normal input features (fresh every forward pass, so
    carrying no information) is appended to the merge input; its weights are
    reported as ``merge.noise``.
    """
    train = train or TrainConfig()
    params = model.init_params(dataset.n_items, hyper, train.seed)
    for name in probe.matrices:
        if name not in params:
            raise ValueError(f"unknown weight {name!r}")
    if probe.noise_dims:
        bound = 1.0 / math.sqrt(hyper.d)
        params["merge.noise"] = np.random.default_rng([train.seed, 1]).uniform(
            -bound, bound, size=(hyper.d, probe.noise_dims))
        params["merge.noise.logvar"] = np.full((hyper.d, probe.noise_dims), INIT_LOGVAR)
    for name in probe.matrices:
        params[f"{name}.logvar"] = np.full(params[name].shape, INIT_LOGVAR)
    reported = list(probe.matrices) + (["merge.noise"] if probe.noise_dims else [])

    report = DensityReport(probe.threshold)

    def record(epoch):
        for name in reported:
            w = _as_matrix(params[name])
            report.records.append({"epoch": epoch, "name": name, "M": w.shape[0], "N": w.shape[1],
                                   "threshold": probe.threshold, "rho": density_ratio(w, probe.threshold)})

    record(0)
    state = OptimizerState.fresh(params, lr=train.lr)
    kl_names = list(probe.matrices) + (["merge.noise"] if probe.noise_dims else [])
    for epoch in range(1, probe.epochs + 1):
        rng = np.random.default_rng([train.seed, epoch, 7])

        def loss_fn(tensors, batch):
            hook = _VariationalLinear(tensors, set(probe.matrices), probe.noise_dims, rng)
            loss = model.batch_loss(tensors, hyper, batch, linear=hook)
            if probe.lam:
                kl = nx.tsum(nx.stack([_kl_tensor(tensors[n], tensors[f"{n}.logvar"]) for n in kl_names]))
                loss = nx.add(loss, nx.mul(kl, probe.lam))
            return loss

        params, state, _ = train_epoch(params, state, hyper, dataset.train, train.batch_size,
                                       [train.seed, epoch], train.weight_decay, loss_fn=loss_fn, epoch=epoch)
        for name in list(params):
            if name.endswith(".logvar"):
                params[name] = np.clip(params[name], LOGVAR_MIN + 1.0, LOGVAR_MAX)
        record(epoch)
    return report
