"""Pose estimation, FGSM, SHAP signatures and detection on a toy-sized scene.

Runs in well under a minute on one core; sizes are far below the desk
defaults so the numbers are illustrative only.

    python demos/walkthrough.py
"""

import numpy as np

from advpose import geometry as geo
from advpose.attacks import fgsm_batch
from advpose.detector import DetectorConfig, DetectorTrainConfig, detect_batch, detection_accuracy, train_detector
from advpose.estimator import EstimatorConfig, TrainConfig, evaluate, predict, train
from advpose.explain import collect_background, shap_batch
from advpose.scenegen import render_sequences, table1_specs

H, W = 30, 40
K = geo.K_DESK.scaled(W / 120, H / 90)

# 1. a small synthetic approach dataset: 13 sequences, every 25th frame
specs = table1_specs(frame_count=500)
frames = render_sequences(specs, K, size=(H, W), frame_stride=25)
print(f"rendered {len(frames)} frames of {H}x{W}")

# 2. fit a narrow estimator for a few epochs
cfg = EstimatorConfig(input_height=H, input_width=W, stem_channels=4, stage_widths=(8, 16, 32), res_blocks=(1, 1, 1),
                      gap_width=32, dtype="float32")
weights, history = train(frames, TrainConfig(epochs=15, batch_size=16, base_lr=1e-3, eval_every=5), cfg)
for rec in history:
    if not np.isnan(rec.position_error):
        print(f"epoch {rec.epoch:3d}  position {rec.position_error:6.2f} m  attitude {rec.attitude_error:5.2f} deg")

# 3. FGSM: the same frames, perturbed with growing budgets
x = frames.batch(np.arange(len(frames)), dtype=cfg.dtype)
for eps in (0.01, 0.05, 0.1, 0.3):
    adv = fgsm_batch(weights, x, frames.positions, frames.quaternions, eps)
    m = evaluate(weights, frames, adv)
    print(f"eps {eps:4.2f}: position {m['position_error']:6.2f} m, max |dx| {np.abs(adv - x).max():.3f}")

# 4. SHAP signatures of clean and attacked frames (9 outputs x G features each)
background = collect_background(weights, x, count=20, seed=0)
adv = fgsm_batch(weights, x, frames.positions, frames.quaternions, 0.1)
sig = np.concatenate([shap_batch(weights, predict(weights, x)[1], background),
                      shap_batch(weights, predict(weights, adv)[1], background)])
labels = np.r_[np.zeros(len(x), bool), np.ones(len(x), bool)]
print("signature block", sig.shape)

# 5. an LSTM detector over the signature rows
order = np.random.default_rng(0).permutation(len(sig))
cut = int(0.8 * len(sig))
tr, te = order[:cut], order[cut:]
det, hist = train_detector(sig[tr], labels[tr], DetectorConfig(feature_width=32, hidden=16, fc_widths=(8,)),
                           DetectorTrainConfig(max_epochs=40, batch_size=32, patience=8))
acc = detection_accuracy(detect_batch(det, sig[te], labels[te]))
print(f"detector stopped at epoch {hist.stop_epoch}, held-out accuracy {acc:.1f}%")
