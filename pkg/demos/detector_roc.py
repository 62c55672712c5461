"""Calibrate the over-activation detector on clean scenes and trace its ROC against a patch.

Also shows the defense-aware attack: with beta < 1 the optimizer trades attack
strength for lower detector scores.
"""
import numpy as np

from segpatch import (
    LossConfig,
    OptimizeConfig,
    calibrate_decision_threshold,
    calibrate_stats,
    detection_scores,
    generate_synthetic_scene,
    init_patch_set,
    optimize_patch,
    patched_images,
    pretrained_toynet,
    roc_auc,
)

model = pretrained_toynet(0)
cal = calibrate_stats(generate_synthetic_scene(100, 64).images, model, nu=0.999)
train, val = generate_synthetic_scene(0, 16), generate_synthetic_scene(200, 32)
clean = detection_scores(model, val.images, cal)

for beta in (None, 0.0, 0.5):
    loss = LossConfig(beta=beta, w_smooth=0.0)
    patch, _ = optimize_patch(train, model, init_patch_set("random", [(16, 32)], seed=0),
                              OptimizeConfig(epochs=100, seed=0, loss=loss, detector=cal if beta is not None else None,
                                             validate_every=0))
    attacked = detection_scores(model, patched_images(val, patch, seed=7), cal)
    roc = roc_auc(clean, attacked)
    rho = calibrate_decision_threshold(clean, attacked, "youden")
    label = "plain attack" if beta is None else f"beta={beta}"
    print(f"{label:>13}: AUC {roc.auc:.3f}  youden rho {rho:.3f}  "
          f"TPR {np.mean(attacked > rho):.2f}  FPR {np.mean(clean > rho):.2f}")
