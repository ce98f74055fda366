"""Closed-loop approach with and without an FGSM burst.

Needs estimator weights trained at the desk image size, for example from
``advpose train-estimator`` (default path runs/estimator/weights.npz):

    python demos/closed_loop.py runs/estimator/weights.npz
"""

import sys

import numpy as np

from advpose.estimator import ModelWeights
from advpose.rendezvous import BurstPlan, run_episode

path = sys.argv[1] if len(sys.argv) > 1 else "runs/estimator/weights.npz"
weights = ModelWeights.load(path)

clean = run_episode(weights)
print(f"no attack: {clean.termination} after {clean.frames} frames, final position "
      f"{np.round(clean.final_position, 2)}, reached={clean.reached_target}")

for eps, start, burst in [(0.5, 20, 10), (0.5, 10, 20), (0.01, 30, 20)]:
    res = run_episode(weights, plan=BurstPlan(eps, start, burst))
    err = np.abs(res.estimated_positions[:, 2] - res.true_positions[:res.frames, 2])
    print(f"eps {eps:4.2f} from {start:2d} m for {burst:2d} frames: {res.termination}, "
          f"final z {res.final_position[2]:6.2f}, worst z error under attack "
          f"{err[res.attacked].max() if res.attacked.any() else 0:.2f} m, success={res.attack_success}")
