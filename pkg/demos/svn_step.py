"""One singular-value SAM step on a freshly built model.

Shows what the optimiser touches: the folded navigator weight is decomposed,
only its singular values move by rho along their gradient, and the update is
then taken with gradients evaluated at that perturbed point.

    python3 demos/svn_step.py
"""
import numpy as np

from dfnlab.linalg import fold_weight, svd
from dfnlab.model import Backbone, CDFSSModel, dfn_specs
from dfnlab.optim import SamConfig, make_optimizer
from dfnlab.synthbench import EpisodeBatch, get_domain, sample_episode

model = CDFSSModel(Backbone.random(0), dfn_specs(), seed=0)
batch = model.attach_features(
    EpisodeBatch.from_episodes([sample_episode(get_domain("source"), 1, s) for s in range(8)]))
opt = make_optimizer(model, lr=1e-3, config=SamConfig(rho=0.5, target="svn"))

before = {n: svd(fold_weight(nav.alpha.data)).S for n, nav in model.navigators.items()}
loss = opt.step(lambda: model.loss(batch))
print(f"loss at the unperturbed point: {loss:.4f}")
for name, eps in opt.last_eps.items():
    s = before[name]
    print(f"{name}: {s.size} singular values, top {s[:3].round(4)}, |eps| = {np.linalg.norm(eps):.6f}")
