"""Per-token evidential heads and Dirichlet uncertainty."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import Linear, Module
from .tensor import Tensor, as_tensor


class EvidentialHead(Module):
    """Token-wise ``Softplus(Linear -> GELU -> Linear)`` producing class evidence.

    The hidden width defaults to ``max(D // 2, 8)``.
    """

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, hidden: Optional[int] = None):
        hidden = hidden or max(dim // 2, 8)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)
        self.num_classes = num_classes

    def __call__(self, tokens: Tensor) -> Tensor:
        return compute_evidence(tokens, self)


def compute_evidence(tokens: Tensor, head: EvidentialHead) -> Tensor:
    """Non-negative evidence ``B x N x C`` for each token."""
    return T.softplus(head.fc2(T.gelu(head.fc1(tokens))))


@dataclass
class DirichletState:
    evidence: Tensor
    alpha: Tensor
    strength: Tensor
    token_uncertainty: Tensor
    global_uncertainty: Tensor

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[-1]


def dirichlet_state(evidence) -> DirichletState:
    """Dirichlet parameters and uncertainty from evidence of shape ``... x N x C``.

    ``alpha = e + 1``, ``S = sum_c alpha``, token uncertainty ``C / S`` and the
    global uncertainty is the token mean.
    """
    evidence = as_tensor(evidence)
    if np.any(evidence.data < 0):
        raise ContractError("evidence must be non-negative")
    C = evidence.shape[-1]
    alpha = evidence + 1.0
    strength = alpha.sum(axis=-1)
    sigma_tok = T.div(float(C), strength)
    return DirichletState(
        evidence=evidence,
        alpha=alpha,
        strength=strength,
        token_uncertainty=sigma_tok,
        global_uncertainty=sigma_tok.mean(axis=-1),
    )


def expected_probs(state: DirichletState) -> Tensor:
    """Dirichlet mean ``alpha / S``."""
    return state.alpha / T.reshape(state.strength, state.strength.shape + (1,))


def softmax_predict(logits) -> Tensor:
    """Max-shifted softmax over the class axis."""
    return T.softmax(as_tensor(logits), axis=-1)
