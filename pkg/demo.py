#!/usr/bin/env python3
"""
Demo for the MLTN toolkit
Shows the squeeze pipeline, parameter counts and cost without any training
"""

import numpy as np

from complexity import ComplexityInput, flops_lotenet, flops_mlp, flops_mltn, flops_tenetx, measured_flops
from data_metrics import synth_blobs
from tn_model import LotenetModel, MltnModel, SqueezeSpec, build_tenetx, squeeze


def demo_squeeze():
    """One 4x4 image folded into 2x2 blocks"""
    print("🧮 Squeeze pipeline")
    print("=" * 50)
    image = np.arange(16, dtype=float).reshape(4, 4) / 16
    spec = SqueezeSpec(2, 4, 4)
    sites = squeeze(image, spec)
    print(f"4x4 image -> {spec.n_sites} sites of dimension {spec.feature_dim}")
    for i, site in enumerate(sites):
        print(f"  site {i}: {site}")
    print()


def demo_dimension_chain():
    """The 128x128 [4,4,4] chain with bond 5"""
    print("🧮 Dimension chain at 128x128")
    print("=" * 50)
    model = MltnModel.build(128, 128, [4, 4, 4], 5, 2, rng=np.random.default_rng(0))
    for line in model.describe():
        print(f"  {line}")
    print(f"  total: {model.param_count():,} parameters")
    print()


def demo_cost():
    """Analytic cost of each family at N = 128^2, k = 4, L = 3, d = 16, bond 5"""
    print("🧮 Analytic cost")
    print("=" * 50)
    c = ComplexityInput(16384, 4, 3, 16, 5)
    rows = [
        ("mltn", flops_mltn(c)),
        ("lotenet", flops_lotenet(c)),
        ("tenetx", flops_tenetx(c)),
        ("mlp", flops_mlp(ComplexityInput(16384, 1, 4, 1, 1))),
    ]
    for name, value in rows:
        print(f"  {name:8s} {value:>14,.0f}")
    print(f"  LoTeNet / MLTN: {rows[1][1] / rows[0][1]:.0f}x")
    print()


def demo_measured():
    """Counted multiplies for one image at 32x32"""
    print("🧮 Measured multiplies at 32x32, strides 4,4, bond 5")
    print("=" * 50)
    images = synth_blobs(8, 32, 32, seed=0).images
    rng = np.random.default_rng(0)
    models = {
        "mltn": MltnModel.build(32, 32, [4, 4], 5, 2, rng=rng, calibration=images),
        "lotenet": LotenetModel.build(32, 32, [4, 4], 5, 2, rng=rng, calibration=images),
        "tenetx": build_tenetx(32, 32, 5, 2, rng=rng, calibration=images),
    }
    for name, model in models.items():
        print(f"  {name:8s} {measured_flops(model, (32, 32), images):>12,}")
    print()


def main():
    """Run all demos"""
    print("🎮 MLTN toolkit demo: no training, no data download.\n")
    demo_squeeze()
    demo_dimension_chain()
    demo_cost()
    demo_measured()
    print("🎯 Next: mltn train --model mltn --strides 2,2 --bond 3 --lr 5e-4 --batch 32 --epochs 50")


if __name__ == "__main__":
    main()
