"""Billboard scene: a patch optimized through the exact camera geometry vs. an EOT patch.

Both patches are evaluated where they would really appear, i.e. warped onto
the billboard in every camera view.
"""
from segpatch import OptimizeConfig, evaluate_patches, generate_projective_scene, init_patch_set, optimize_patch
from segpatch import pretrained_toynet

model = pretrained_toynet(0)
data = generate_projective_scene(0, 16)
start = init_patch_set("random", [(16, 32)], seed=0)
print("random patch on the billboard:",
      round(evaluate_patches(model, data, start, placement="projective", seed=123)["mIoU"], 3))

for mode in ("projective", "eot"):
    patch, _ = optimize_patch(data, model, start, OptimizeConfig(epochs=100, seed=0, placement=mode, validate_every=0))
    miou = evaluate_patches(model, data, patch, placement="projective", seed=123)["mIoU"]
    print(f"trained with {mode:>10} placement: mIoU {miou:.3f}")
