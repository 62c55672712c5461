"""Craft a universal EOT patch against ToyNet and compare it with a random patch.

    python demos/universal_attack.py [--epochs 100] [--seed 0]
"""
import argparse

from segpatch import (
    LossConfig,
    OptimizeConfig,
    evaluate_patches,
    generate_synthetic_scene,
    init_patch_set,
    optimize_patch,
    pretrained_toynet,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = pretrained_toynet(0)
    data = generate_synthetic_scene(args.seed, 16)
    start = init_patch_set("random", [(16, 32)], seed=args.seed)

    print("clean mIoU          ", round(evaluate_patches(model, data)["mIoU"], 3))
    print("random patch mIoU   ", round(evaluate_patches(model, data, start, seed=123)["mIoU"], 3))

    for gamma in ("adaptive", "ce-all"):
        cfg = OptimizeConfig(epochs=args.epochs, seed=args.seed, loss=LossConfig(gamma=gamma), validate_every=10)
        patch, report = optimize_patch(data, model, start, cfg)
        res = evaluate_patches(model, data, patch, seed=123)
        print(f"{gamma:>8} patch mIoU  ", round(res["mIoU"], 3),
              " adversarial effect", round(res["adversarial_effect"], 3),
              " validation curve", [round(v, 3) for v in report.val_miou if v == v])


if __name__ == "__main__":
    main()
