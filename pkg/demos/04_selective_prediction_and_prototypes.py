"""
Abstaining on uncertain samples and looking at prototypes
=========================================================

Ranks test images by the model's global uncertainty, prints the
risk-coverage trade-off and lists the prototypes that best match one image.
"""

import numpy as np

from evroute.backbone import preset
from evroute.data import SyntheticSpec, generate
from evroute.metrics import McConfig, PredictionSet, risk_coverage
from evroute.prototypes import top_matches
from evroute.trainer import TrainConfig, evaluate, train

data = generate(SyntheticSpec(classes=3, train=800, val=200, test=200, seed=11))
result = train(preset("toy"), data, TrainConfig(epochs=20))
preds, _ = evaluate(result.best, data.test, McConfig(T=20))

by_sigma = risk_coverage(preds)
by_confidence = risk_coverage(PredictionSet(preds.probs, preds.labels))
print("AURC ranked by sigma     ", round(by_sigma.aurc, 4))
print("AURC ranked by confidence", round(by_confidence.aurc, 4))
for c in (0.5, 0.7, 0.9, 1.0):
    k = max(1, int(np.ceil(c * len(preds.labels))))
    print(f"coverage {c:.1f}: accuracy {1 - by_sigma.risk[k - 1]:.3f}")

# prototype matches for the first test image
model = result.best.build_model()
out = model.forward(data.test.images[:1])
W = out.grids[-1].W
print("\npredicted class", int(out.logits.data.argmax()), "true class", int(data.test.labels[0]))
for m in top_matches(out.tokens, model.prototype_head, 3)[0]:
    print(f"prototype {m.prototype} (class {m.cls}) best at token row {m.token // W}, col {m.token % W}: {m.similarity:.3f}")
