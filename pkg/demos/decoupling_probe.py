"""Train a baseline and a deep residual adapter on one seed, then compare CKA.

A reduced schedule (about a minute after the backbone is pretrained) so the
numbers are illustrative only; the acceptance suite uses the full defaults.

    python3 demos/decoupling_probe.py [seed]
"""
import sys

from dfnlab import harness
from dfnlab.config import ExperimentConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ExperimentConfig(seeds=(seed,), source_epochs=10, population=128)

models = {}
for variant in ("baseline", "backbone-deep"):
    models[variant], rep = harness.trained_model(cfg, seed, variant)
    print(f"{variant:>14}: source mIoU {rep.summary['source_miou']:.3f}, "
          f"final epoch loss {rep.losses['source'][-1]:.4f}")

probe = harness.decouple_probe(models, cfg, seed)
print(f"\n{'target':>10} {'tap':>9} {'baseline':>9} {'adapter':>9} {'delta':>8}")
for t in cfg.targets:
    for tap in ("backbone", "encoder"):
        b = harness._cka(probe, "baseline", tap, t)
        d = harness._cka(probe, "backbone-deep", tap, t)
        print(f"{t:>10} {tap:>9} {b:9.4f} {d:9.4f} {d - b:+8.4f}")
