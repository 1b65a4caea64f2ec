"""
Choosing what to share
======================

A model is split into a shared part, updated by the coordinator from
aggregated gradients, and a private part that never leaves its platform.
This demo trains the same federation under each decomposition strategy and
prints how many parameters are shared and the resulting F1.
"""

import numpy as np

from fedner.experiments import StudyConfig, prepare, run_federated
from fedner.federated import FederationConfig, build_federation
from fedner.model import STRATEGIES

study = StudyConfig(rounds=200)
train, test = prepare(seed=1, study=study)

# %%
# Count shared and private parameters
# -----------------------------------
# ``build_federation`` creates the coordinator and platforms without training.
for name in STRATEGIES:
    coordinator, platforms = build_federation(train, study.model, FederationConfig(strategy=name))
    private = [p.private.size for p in platforms]
    print(f"{name:>18}: shared {coordinator.theta.size:6d}, private per platform {private}")

# %%
# Train under each strategy
# -------------------------
# ``all-private`` degenerates to independent training, ``all-shared`` trains
# one model (with one label alphabet) for everybody.
for name in STRATEGIES:
    recs = run_federated(train, test, study, seed=1, strategy=name)
    f1 = np.array([r["strict_f1"] for r in recs])
    print(f"{name:>18}: strict F1 per platform {np.round(100 * f1, 1).tolist()}, mean {100 * f1.mean():.1f}")
