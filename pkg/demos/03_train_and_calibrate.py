"""
Training both modes and comparing calibration
=============================================

Generates a small synthetic dataset, trains the baseline and the routed
model with identical settings and prints one metric row per model.
Takes about a minute per model on a laptop CPU.
"""

import numpy as np

from evroute.backbone import preset
from evroute.data import SyntheticSpec, generate
from evroute.metrics import McConfig, reliability
from evroute.trainer import TrainConfig, evaluate, train

data = generate(SyntheticSpec(classes=3, train=800, val=200, test=200, ambiguity=0.25, seed=7))
print("train/val/test:", len(data.train), len(data.val), len(data.test))
print("images with a tissue mask:", int(data.train.has_mask.sum()))

cfg = preset("toy", in_channels=1, num_classes=3)
rows = {}
for mode in ("baseline", "ug2rlpr"):
    result = train(cfg, data, TrainConfig(epochs=20, mode=mode))
    print(f"{mode}: best epoch {result.best.epoch}, val loss {min(h['val_loss'] for h in result.history):.3f}")
    preds, rows[mode] = evaluate(result.best, data.test, McConfig(T=20), run_id=mode)

keys = ["accuracy", "macro_f1", "auroc", "ece", "mce", "brier", "nll"]
print("\n" + "mode".ljust(10) + "".join(k.rjust(10) for k in keys))
for mode, row in rows.items():
    print(mode.ljust(10) + "".join(f"{row[k]:10.4f}" for k in keys))

# reliability table for the last model: mean confidence against accuracy per bin
table = reliability(preds)
for lo, hi, n, conf, acc in zip(table["lower"], table["upper"], table["count"], table["confidence"], table["accuracy"]):
    if n:
        print(f"({lo:.2f}, {hi:.2f}]  n={int(n):3d}  conf={conf:.3f}  acc={acc:.3f}")
