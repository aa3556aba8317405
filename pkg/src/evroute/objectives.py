"""Training objective: cross-entropy plus weighted routing and prototype terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .prototypes import cluster_loss, diversity_loss
from .tensor import Tensor, as_tensor


@dataclass
class LossWeights:
    route: float = 0.3
    cluster: float = 0.1
    diversity: float = 0.05

    def validate(self) -> None:
        for name in ("route", "cluster", "diversity"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    routing: float
    cluster: float
    diversity: float

    def as_row(self) -> dict:
        return {
            "total": self.total.item(),
            "ce": self.ce,
            "routing": self.routing,
            "cluster": self.cluster,
            "diversity": self.diversity,
        }


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ContractError(f"labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    logp = T.log_softmax(logits, axis=-1)
    return -logp[np.arange(B), labels.astype(np.intp)].mean()


def total_loss(ce: Tensor, routing: Tensor, cluster: Tensor, diversity: Tensor, weights: LossWeights) -> LossBreakdown:
    """``ce + w_route * routing + w_cluster * cluster + w_div * diversity``, summed left to right."""
    weights.validate()
    total = ce + weights.route * routing
    total = total + weights.cluster * cluster
    total = total + weights.diversity * diversity
    return LossBreakdown(
        total=total,
        ce=ce.item(),
        routing=as_tensor(routing).item(),
        cluster=as_tensor(cluster).item(),
        diversity=as_tensor(diversity).item(),
    )


def model_loss(model, out, labels, weights: LossWeights) -> LossBreakdown:
    """Assemble the objective from a :class:`~evroute.backbone.ForwardOutput`."""
    ce = cross_entropy(out.logits, labels)
    if out.similarity is not None:
        cl, dv = cluster_loss(out.similarity), diversity_loss(model.prototype_head)
    else:
        cl, dv = Tensor(0.0), Tensor(0.0)
    return total_loss(ce, out.routing_loss, cl, dv, weights)
