"""Image-specific targeted attack: relabel 'object' pixels as their nearest other class."""
import numpy as np

from segpatch import (
    AffinePlacement,
    EOTConfig,
    LossConfig,
    OptimizeConfig,
    apply_patches,
    build_target_label,
    forward,
    generate_synthetic_scene,
    init_patch_set,
    optimize_patch,
    pretrained_toynet,
)
from segpatch.metrics import class_iou

OBJECT = 3
model = pretrained_toynet(0)
data = generate_synthetic_scene(0, 1)
sample = data[0]
H, W = sample.labels.shape


def predict(img):
    return forward(model, img)[0].argmax(1).numpy().reshape(H, W)


original = predict(sample.image)
target = build_target_label(original, OBJECT, "nn")
print("object pixels:", int((original == OBJECT).sum()),
      "-> relabeled as", {int(c): int(n) for c, n in zip(*np.unique(target[original == OBJECT], return_counts=True))})

start = init_patch_set("random", [(16, 32)], seed=0)
cfg = OptimizeConfig(epochs=100, seed=0, loss=LossConfig(targeted=True, attacked=OBJECT, target="nn"),
                     eot=EOTConfig(scale_range=(1, 1), shift_range=(0, 0)), appearance="identity",
                     validate_every=0)
patch, _ = optimize_patch(data, model, start, cfg)
center = AffinePlacement(center=(W / 2, H / 2))
for name, p in (("random", start), ("optimized", patch)):
    x, mask, _ = apply_patches(sample.image, [p[0].data], [center])
    iou = class_iou(predict(x.numpy()), original, OBJECT, exclude=mask.numpy())
    print(f"{name:>9} patch: object IoU vs clean prediction {iou:.3f}")
