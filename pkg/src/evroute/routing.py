"""Uncertainty-gated token routing and refinement.

Inside a routed block the attention output ``A`` is corrected towards a local
refinement ``R``::

    M      = sigmoid(l)                  soft routing mask from a per-token linear map
    M_eff  = M * m * (1 - sigma_tok)     tissue mask m, token uncertainty sigma_tok
    delta  = M_eff * lambda_ref * (R - A)
    delta' = (1 - beta * sigma) * delta  sigma is the per-sample mean uncertainty
    A_out  = A + delta'
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import Linear, Module, param
from .tensor import Tensor, as_tensor


class RoutingPredictor(Module):
    """Per-token ``D -> 1`` linear map (a 1x1 convolution on the token grid)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(dim, 1, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        out = self.proj(tokens)
        return T.reshape(out, out.shape[:-1])


class RefinementBranch(Module):
    """Two 1x1 convolutions (``D -> D -> D``) with GELU between."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(tokens)))


class RoutingBlockParams(Module):
    def __init__(self, dim: int, beta: float, rng: np.random.Generator, lambda_init: float = 0.1):
        if not 0.0 <= beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {beta}")
        self.routing_predictor = RoutingPredictor(dim, rng)
        self.refinement_branch = RefinementBranch(dim, rng)
        self.lambda_ref = param(np.array(lambda_init))
        self.beta = float(beta)


@dataclass
class RoutingOutputs:
    logits: Tensor
    mask: Tensor
    effective_mask: Tensor
    delta: Tensor
    delta_gated: Tensor
    routed: Tensor


def routing_mask(tokens_norm: Tensor, predictor: RoutingPredictor):
    """Return ``(logits, mask)`` with ``mask = sigmoid(logits)``, both ``B x N``."""
    logits = predictor(tokens_norm)
    return logits, T.sigmoid(logits)


def effective_mask(mask, tissue: Optional[np.ndarray], sigma_tok) -> Tensor:
    """``M * m * (1 - sigma_tok)``; a missing tissue mask counts as all ones."""
    mask, sigma_tok = as_tensor(mask), as_tensor(sigma_tok)
    gate = mask * (1.0 - sigma_tok)
    if tissue is None:
        return gate
    tissue = np.asarray(tissue, dtype=np.float64)
    if not np.all((tissue == 0.0) | (tissue == 1.0)):
        raise ContractError("tissue mask values must be 0 or 1")
    return mask * tissue * (1.0 - sigma_tok)


def refine(A: Tensor, R: Tensor, m_eff, lambda_ref, beta: float, sigma_global):
    """Gated refinement update.

    Args:
        A: Attention output ``B x N x D``.
        R: Refinement-branch output ``B x N x D``.
        m_eff: Effective mask ``B x N``, broadcast over channels.
        lambda_ref: Scalar refinement magnitude.
        beta: Gate coefficient in ``[0, 1]``.
        sigma_global: Per-sample uncertainty ``B``.

    Returns:
        ``(delta, delta_gated, routed)``.
    """
    A, R, m_eff, sigma_global = as_tensor(A), as_tensor(R), as_tensor(m_eff), as_tensor(sigma_global)
    m3 = T.reshape(m_eff, m_eff.shape + (1,))
    delta = m3 * (as_tensor(lambda_ref) * (R - A))
    gate = 1.0 - beta * sigma_global
    delta_gated = T.reshape(gate, gate.shape + (1, 1)) * delta
    return delta, delta_gated, A + delta_gated


def routing_loss(logits, tissue: Optional[np.ndarray], has_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean binary cross-entropy with logits over tokens and masked samples.

    Only samples flagged in ``has_mask`` contribute; with no supervised sample
    the loss is exactly zero.
    """
    logits = as_tensor(logits)
    if tissue is None:
        return Tensor(0.0)
    tissue = np.asarray(tissue, dtype=np.float64)
    B, N = logits.shape
    weights = np.ones(B) if has_mask is None else np.asarray(has_mask, dtype=np.float64)
    count = weights.sum()
    if count == 0:
        return Tensor(0.0)
    per_token = T.softplus(logits) - logits * tissue
    per_sample = per_token.sum(axis=-1)
    return (per_sample * weights).sum() / (count * N)
