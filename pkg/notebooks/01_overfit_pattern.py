"""
Overfitting a deterministic toy corpus
======================================

Fifty sessions walk the cycle 1 -> 2 -> ... -> 20 -> 1, so the next item is
a function of the last one. A healthy model should memorise this within a
handful of epochs.
"""

import numpy as np

from attenmixer import evaluation, model, synthetic, training
from attenmixer.model import HyperParams

ds = synthetic.pattern_dataset()
print(len(ds.train), "training prefixes over", ds.n_items, "items")

hyper = HyperParams(d=32, L=3, H=4)
params = model.init_params(ds.n_items, hyper, seed=0)
state = training.OptimizerState.fresh(params, lr=1e-3)

# %% train until the top-1 guess is almost always right
for epoch in range(1, 31):
    params, state, loss = training.train_epoch(params, state, hyper, ds.train, 100, [0, epoch])
    ranks, _ = evaluation.collect_ranks(evaluation.model_scorer(params, hyper), ds.train)
    hr1, mrr20 = evaluation.hr_mrr(ranks, 1)[0], evaluation.hr_mrr(ranks, 20)[1]
    print(f"epoch {epoch:2d}  loss {loss:.4f}  HR@1 {hr1:.3f}  MRR@20 {mrr20:.3f}")
    if hr1 >= 0.95:
        break

# %% the attention map of one prefix: rows are items, columns are (level, head)
prefix = [3, 4, 5, 6]
r = model.readout(params, hyper, [prefix])
np.set_printoptions(precision=3, suppress=True)
print(model.attention_matrix(r.alpha, 0, len(prefix), hyper))
print("most likely next item:", int(np.argmax(model.forward(prefix, params, hyper))) + 1)
