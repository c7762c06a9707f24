"""
How much of the readout does the model use?
===========================================

The probed weight matrices get Gaussian posteriors, and a KL penalty pulls
unneeded entries towards zero. An extra block of pure-noise input features
is appended to the merge layer as a control that carries no signal. We track
the share of entries above a magnitude threshold per epoch.
"""

from attenmixer import sparsity, synthetic
from attenmixer.model import HyperParams
from attenmixer.sparsity import ProbeConfig
from attenmixer.training import TrainConfig

ds = synthetic.planted_pairs(n_rows=3, n_cols=6, n_train=400, n_valid=100, n_test=100)
hyper = HyperParams(d=8, L=2, H=2)

for lam in (0.0, 1.0, 10.0):
    report = sparsity.probe_run(ds, hyper, ProbeConfig(lam=lam, threshold=0.05, epochs=10, noise_dims=8),
                                TrainConfig(lr=3e-3, batch_size=50))
    print(f"lambda = {lam}")
    for name in ("merge", "head_query", "head_key", "merge.noise"):
        rho = report.series(name)
        print(f"  {name:12s} " + " ".join(f"{x:.2f}" for x in rho))
