"""Prototype classification head.

Each class owns ``K`` learned prototype vectors. Tokens are compared with
every prototype by temperature-scaled cosine similarity; similarities are
pooled over tokens into per-prototype evidence and then over each class's
prototypes into class logits.
"""

from __future__ import annotations

import math
from typing import List, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import Module, param
from .tensor import Tensor, as_tensor

NORM_FLOOR = 1e-12
AGG_MODES = ("logsumexp", "max", "mean")
DIV_SCOPES = ("within_class", "global")


class PrototypeBank(Module):
    """``C * K`` prototypes with a fixed class map and learnable log-temperature.

    Prototypes are stored class-major: prototype ``k`` belongs to class ``k // K``.
    """

    def __init__(
        self,
        num_classes: int,
        dim: int,
        rng: np.random.Generator,
        per_class: int = 3,
        log_temperature: float = math.log(10.0),
        use_cosine: bool = True,
        agg_mode: str = "logsumexp",
        div_scope: str = "within_class",
        q: float = 2.0,
    ):
        if agg_mode not in AGG_MODES:
            raise ContractError(f"agg_mode must be one of {AGG_MODES}, got {agg_mode!r}")
        if div_scope not in DIV_SCOPES:
            raise ContractError(f"div_scope must be one of {DIV_SCOPES}, got {div_scope!r}")
        if q < 1:
            raise ContractError(f"diversity power must be >= 1, got {q}")
        init = rng.normal(size=(num_classes * per_class, dim))
        init /= np.linalg.norm(init, axis=1, keepdims=True)
        self.prototypes = param(init)
        self.log_temperature = param(np.array(float(log_temperature)))
        self.num_classes = num_classes
        self.per_class = per_class
        self.class_map = np.repeat(np.arange(num_classes), per_class)
        self.use_cosine = use_cosine
        self.agg_mode = agg_mode
        self.div_scope = div_scope
        self.q = float(q)

    @property
    def total(self) -> int:
        return self.num_classes * self.per_class

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.data))


def _unit(x: Tensor) -> Tensor:
    return x / T.maximum(T.l2norm(x, axis=-1), NORM_FLOOR)


def similarity(tokens, bank: PrototypeBank) -> Tensor:
    """Token-prototype similarities ``B x T x K_tot``."""
    tokens = as_tensor(tokens)
    if tokens.shape[-1] != bank.prototypes.shape[-1]:
        raise ContractError(f"token dim {tokens.shape[-1]} != prototype dim {bank.prototypes.shape[-1]}")
    if not bank.use_cosine:
        return tokens @ T.transpose(bank.prototypes)
    cos = _unit(tokens) @ T.transpose(_unit(bank.prototypes))
    return T.exp(bank.log_temperature) * cos


def _aggregate(x: Tensor, axis: int, mode: str) -> Tensor:
    if mode == "logsumexp":
        return T.logsumexp(x, axis=axis)
    if mode == "max":
        return T.reduce_max(x, axis=axis)
    return T.reduce_mean(x, axis=axis)


def class_logits(s, bank: PrototypeBank) -> Tensor:
    """Pool similarities over tokens, then over each class's prototypes -> ``B x C``."""
    s = as_tensor(s)
    evidence = _aggregate(s, 1, bank.agg_mode)
    B = evidence.shape[0]
    grouped = T.reshape(evidence, (B, bank.num_classes, bank.per_class))
    return _aggregate(grouped, 2, bank.agg_mode)


def cluster_loss(s) -> Tensor:
    """Negative mean over batch and prototypes of the best token match."""
    s = as_tensor(s)
    return -T.reduce_max(s, axis=1).mean()


def _pair_index(bank: PrototypeBank):
    k = np.arange(bank.total)
    rows, cols = np.meshgrid(k, k, indexing="ij")
    keep = rows != cols
    if bank.div_scope == "within_class":
        keep &= bank.class_map[rows] == bank.class_map[cols]
    return rows[keep], cols[keep]


def diversity_loss(bank: PrototypeBank) -> Tensor:
    """Mean ``|cos|^q`` over the selected off-diagonal prototype pairs."""
    rows, cols = _pair_index(bank)
    if rows.size == 0:
        return Tensor(0.0)
    unit = _unit(bank.prototypes)
    gram = unit @ T.transpose(unit)
    return T.power(T.absolute(gram[rows, cols]), bank.q).mean()


def prototype_regularizer(lambda_c: float, lambda_d: float, s, bank: PrototypeBank) -> Tensor:
    if lambda_c < 0 or lambda_d < 0:
        raise ContractError("prototype loss weights must be non-negative")
    return lambda_c * cluster_loss(s) + lambda_d * diversity_loss(bank)


class Match(NamedTuple):
    prototype: int
    cls: int
    token: int
    similarity: float


def top_matches(tokens, bank: PrototypeBank, n: int) -> List[List[Match]]:
    """Per image, the ``n`` prototypes with highest best-token similarity.

    Ties are broken by lower prototype id, and the best token by lower index.
    """
    if not 1 <= n <= bank.total:
        raise ContractError(f"n must be in [1, {bank.total}], got {n}")
    s = similarity(tokens, bank).data
    best_tok = np.argmax(s, axis=1)
    best = np.max(s, axis=1)
    ids = np.arange(bank.total)
    out = []
    for b in range(s.shape[0]):
        order = np.lexsort((ids, -best[b]))[:n]
        out.append([Match(int(k), int(bank.class_map[k]), int(best_tok[b, k]), float(best[b, k])) for k in order])
    return out
