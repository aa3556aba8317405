"""
Evidence, token uncertainty and the routing gate
================================================

How per-token evidence turns into a Dirichlet, how the uncertainty shrinks
the effective mask, and why full uncertainty falls back to plain attention.
"""

import numpy as np

from evroute.backbone import Model, preset
from evroute.evidential import dirichlet_state, expected_probs
from evroute.routing import effective_mask, refine

rng = np.random.default_rng(3)

# three tokens, three classes: no evidence, weak evidence, strong evidence
evidence = np.array([[[0.0, 0.0, 0.0], [0.5, 0.2, 0.1], [40.0, 1.0, 0.5]]])
state = dirichlet_state(evidence)
print("alpha\n", state.alpha.data[0])
print("expected probabilities\n", expected_probs(state).data[0].round(3))
print("token uncertainty", state.token_uncertainty.data[0].round(3))
print("global uncertainty", state.global_uncertainty.data)

# the routing predictor proposes m; tissue mask M and (1 - sigma) damp it
m = np.array([[0.9, 0.9, 0.9]])
tissue = np.array([[1.0, 0.0, 1.0]])
print("effective mask", effective_mask(m, tissue, state.token_uncertainty).data[0].round(3))

# the gate (1 - beta * sigma) never enlarges the update
A, R = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))
m_eff = effective_mask(m, tissue, state.token_uncertainty)
for beta in (0.0, 0.4, 0.8, 1.0):
    delta, gated, _ = refine(A, R, m_eff, 0.5, beta, state.global_uncertainty)
    print(f"beta={beta}: |gated| / |delta| = {np.abs(gated.data).sum() / np.abs(delta.data).sum():.3f}")

# with every evidential head forced to zero and beta=1 the routed model is the baseline
model = Model(preset("toy", dropout=0.0, head="prototype"), seed=0)
images = rng.normal(size=(2, 1, 32, 32))
base = model.forward(images, mode="baseline").logits.data
fallback = model.forward(images, mode="ug2rlpr", beta=1.0, zero_evidence=True).logits.data
print("max difference at sigma=1, beta=1:", np.abs(base - fallback).max())
