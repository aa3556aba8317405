"""
Calibration, discrimination and selective-prediction metrics, plus the
MC-dropout inference harness.

All metrics are pure numpy functions of a :class:`PredictionSet`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError
from .evidential import softmax_predict

COVERAGES = (0.5, 0.7, 0.9)

METRIC_COLUMNS = [
    "run_id",
    "beta",
    "ece",
    "brier",
    "nll",
    "mce",
    "aurc",
    "acc@50",
    "acc@70",
    "acc@90",
    "accuracy",
    "macro_f1",
    "auroc",
]


@dataclass
class PredictionSet:
    """Per-sample class probabilities with labels and an optional ranking score.

    ``uncertainty_score`` orders samples for selective prediction (lower means
    more confident). When absent, ``1 - confidence`` is used.
    """

    probs: np.ndarray
    labels: np.ndarray
    uncertainty_score: Optional[np.ndarray] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.intp)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.labels.shape[0]:
            raise ContractError(f"probs {self.probs.shape} and labels {self.labels.shape} disagree")
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ContractError("probability rows must sum to 1")
        if self.uncertainty_score is not None:
            self.uncertainty_score = np.asarray(self.uncertainty_score, dtype=np.float64)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels

    @property
    def score(self) -> np.ndarray:
        return 1.0 - self.confidence if self.uncertainty_score is None else self.uncertainty_score


# ----------------------------------------------------------- calibration
def _bin_stats(preds: PredictionSet, bins: int):
    if bins < 1:
        raise ContractError(f"bins must be >= 1, got {bins}")
    conf = preds.confidence
    edges = np.linspace(0.0, 1.0, bins + 1)
    # bin b holds edges[b] < conf <= edges[b+1]; conf == 0 falls in bin 0
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    acc = np.bincount(idx, weights=preds.correct.astype(np.float64), minlength=bins)
    cf = np.bincount(idx, weights=conf, minlength=bins)
    nonempty = count > 0
    gap = np.zeros(bins)
    gap[nonempty] = np.abs(acc[nonempty] / count[nonempty] - cf[nonempty] / count[nonempty])
    return count, gap, nonempty


def ece(preds: PredictionSet, bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins."""
    count, gap, _ = _bin_stats(preds, bins)
    return float(np.sum(count / count.sum() * gap))


def mce(preds: PredictionSet, bins: int = 15) -> float:
    """Largest confidence-accuracy gap over non-empty bins."""
    _, gap, nonempty = _bin_stats(preds, bins)
    return float(gap[nonempty].max())


def reliability(preds: PredictionSet, bins: int = 15) -> Dict[str, np.ndarray]:
    """Per-bin count, mean confidence and accuracy (NaN for empty bins)."""
    conf = preds.confidence
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.bincount(idx, weights=preds.correct.astype(float), minlength=bins) / count
        mean_conf = np.bincount(idx, weights=conf, minlength=bins) / count
    return {"lower": edges[:-1], "upper": edges[1:], "count": count, "confidence": mean_conf, "accuracy": acc}


def brier(preds: PredictionSet) -> float:
    onehot = np.eye(preds.probs.shape[1])[preds.labels]
    return float(np.mean(np.sum((preds.probs - onehot) ** 2, axis=1)))


def nll(preds: PredictionSet, floor: float = 1e-12) -> float:
    p_true = preds.probs[np.arange(len(preds.labels)), preds.labels]
    return float(np.mean(-np.log(np.maximum(p_true, floor))))


# ----------------------------------------------------- discrimination
def accuracy(preds: PredictionSet) -> float:
    return float(np.mean(preds.correct))


def macro_f1(preds: PredictionSet) -> float:
    """F1 averaged over classes that occur in the labels or the predictions."""
    y, p = preds.labels, preds.predictions
    scores = []
    for c in np.union1d(y, p):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auroc(preds: PredictionSet) -> float:
    """Macro one-vs-rest AUROC over classes with both positives and negatives."""
    vals = [binary_auroc(preds.probs[:, c], preds.labels == c) for c in range(preds.probs.shape[1])]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


# ------------------------------------------------- selective prediction
def coverage_count(c: float, n: int) -> int:
    """Number of retained samples at coverage ``c``: ``ceil(c * n)``, at least 1."""
    return max(1, min(n, math.ceil(c * n - 1e-9)))


@dataclass
class RiskCoverage:
    aurc: float
    coverage: np.ndarray
    risk: np.ndarray
    acc_at: Dict[float, float] = field(default_factory=dict)


def risk_coverage(preds: PredictionSet, coverages: Sequence[float] = COVERAGES) -> RiskCoverage:
    """Risk-coverage curve from ranking samples by ascending uncertainty score.

    Ties keep the original sample order. ``AURC`` is the mean selective risk
    over every prefix size ``k = 1..B``.
    """
    n = len(preds.labels)
    order = np.argsort(preds.score, kind="stable")
    errors = (~preds.correct[order]).astype(np.float64)
    k = np.arange(1, n + 1)
    risk = np.cumsum(errors) / k
    acc_at = {c: float(1.0 - risk[coverage_count(c, n) - 1]) for c in coverages}
    return RiskCoverage(aurc=float(risk.mean()), coverage=k / n, risk=risk, acc_at=acc_at)


def metric_row(preds: PredictionSet, run_id: str = "", beta: Optional[float] = None, bins: int = 15) -> Dict:
    rc = risk_coverage(preds)
    return {
        "run_id": run_id,
        "beta": "" if beta is None else beta,
        "ece": ece(preds, bins),
        "brier": brier(preds),
        "nll": nll(preds),
        "mce": mce(preds, bins),
        "aurc": rc.aurc,
        "acc@50": rc.acc_at[0.5],
        "acc@70": rc.acc_at[0.7],
        "acc@90": rc.acc_at[0.9],
        "accuracy": accuracy(preds),
        "macro_f1": macro_f1(preds),
        "auroc": auroc(preds),
    }


# ----------------------------------------------------------- MC dropout
@dataclass
class McConfig:
    T: int = 20
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.T < 1:
            raise ContractError(f"MC pass count T must be >= 1, got {self.T}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class McResult:
    predictions: PredictionSet
    pass_probs: np.ndarray
    variance: np.ndarray


def predict_probs(model, images, mode: str, rng=None, dropout_rate=None, beta=None, batch_size: int = 64) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Class probabilities and per-sample uncertainty (or None) from one pass."""
    probs, unc = [], []
    for start in range(0, len(images), batch_size):
        out = model.forward(images[start : start + batch_size], mode=mode, rng=rng, dropout_rate=dropout_rate, beta=beta)
        probs.append(softmax_predict(out.logits).data)
        unc.append(out.global_uncertainty)
    u = None if any(x is None for x in unc) else np.concatenate(unc)
    return np.concatenate(probs), u


def mc_predict(model, images, labels, cfg: McConfig, mode: str = "ug2rlpr", beta: Optional[float] = None) -> McResult:
    """Average class probabilities over ``cfg.T`` dropout-active passes.

    Pass ``t`` draws its dropout masks from an independent stream spawned from
    ``cfg.seed``, so results do not depend on evaluation order.
    """
    cfg.validate()
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.T)
    passes, uncs = [], []
    for ss in streams:
        p, u = predict_probs(model, images, mode, rng=np.random.default_rng(ss), dropout_rate=cfg.dropout_rate, beta=beta)
        passes.append(p)
        uncs.append(u)
    pass_probs = np.stack(passes)
    mean = pass_probs.mean(axis=0)
    score = None if uncs[0] is None else np.mean(np.stack(uncs), axis=0)
    preds = PredictionSet(mean, labels, score)
    # centring on the first pass keeps the variance exactly zero for identical passes
    return McResult(preds, pass_probs, (pass_probs - pass_probs[0]).var(axis=0))


def deterministic_predict(model, images, labels, mode: str = "ug2rlpr", beta: Optional[float] = None) -> PredictionSet:
    """Single pass with dropout disabled."""
    p, u = predict_probs(model, images, mode, beta=beta)
    return PredictionSet(p, labels, u)
