"""
Deterministic training loop, optimizers and checkpoints.

Checkpoint files (``.mfur``), little-endian::

    magic    4 bytes  b"MFUR"
    version  u32      1
    config   u32 length + UTF-8 JSON  {"model": ..., "train": ...}
    epoch    u32
    rng      u32 length + UTF-8 JSON  numpy bit-generator state
    meta     u32 length + UTF-8 JSON  optimizer step, early-stopping state, history
    count    u32
    count x  (u32 name length, name, u32 rank, u64 dims * rank, f64 payload)

The tensor table holds model parameters under their own names and optimizer
moments under ``optim.m.<name>`` / ``optim.v.<name>``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .backbone import BackboneConfig, Model
from .data import Dataset, Split
from .errors import ContractError, DivergenceError, FormatError, LoadError
from .metrics import METRIC_COLUMNS, McConfig, accuracy, auroc, deterministic_predict, macro_f1, mc_predict, metric_row, nll
from .objectives import LossWeights, model_loss

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"MFUR"
CKPT_VERSION = 1
MONITORS = {"val_loss": -1, "val_accuracy": 1, "val_auroc": 1}
HISTORY_COLUMNS = [
    "epoch",
    "train_total",
    "train_ce",
    "train_routing",
    "train_cluster",
    "train_diversity",
    "val_loss",
    "val_accuracy",
    "val_macro_f1",
    "val_auroc",
]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    monitor: str = "val_loss"
    seed: int = 0
    mode: str = "ug2rlpr"
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.monitor not in MONITORS:
            raise ContractError(f"monitor must be one of {sorted(MONITORS)}")
        if self.mode not in ("baseline", "ug2rlpr"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")
        self.weights.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -------------------------------------------------------------- optimizers
class SGD:
    def __init__(self, params: Dict, lr: float):
        self.params = params
        self.lr = lr
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def state(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state(self, tensors: Dict[str, np.ndarray], step: int) -> None:
        self.step_count = step


class Adam:
    def __init__(self, params: Dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> Dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: Dict[str, np.ndarray], step: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"optim.m.{k}"].copy()
            self.v[k] = tensors[f"optim.v.{k}"].copy()
        self.step_count = step


def make_optimizer(model: Model, cfg: TrainConfig):
    params = dict(model.named_parameters())
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr)
    return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


# -------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    config: Dict
    params: Dict[str, np.ndarray]
    epoch: int = 0
    rng_state: Dict = field(default_factory=dict)
    meta: Dict = field(default_factory=dict)
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def model_config(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.config["model"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config["train"])

    def build_model(self) -> Model:
        model = Model(self.model_config, seed=self.train_config.seed)
        model.load_state_dict(self.params)
        return model


def _blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _blob(ckpt.config), struct.pack("<I", ckpt.epoch)]
    parts += [_blob(ckpt.rng_state), _blob(ckpt.meta)]
    tensors = {**ckpt.params, **ckpt.optimizer}
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<I", len(bname)) + bname + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at offset {self.pos} (need {n} more bytes)")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def json(self):
        return json.loads(self.take(self.u32()).decode("utf-8"))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing checkpoint: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0, expected {CKPT_MAGIC!r}")
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at offset 4")
    config = r.json()
    epoch = r.u32()
    rng_state, meta = r.json(), r.json()
    params, optim = {}, {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        arr = np.frombuffer(r.take(8 * int(np.prod(dims, dtype=np.int64))), dtype="<f8").reshape(dims).copy()
        (optim if name.startswith("optim.") else params)[name] = arr
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(config, params, epoch, rng_state, meta, optim)


# ------------------------------------------------------------------ training
@dataclass
class TrainResult:
    model: Model
    best: Checkpoint
    last: Checkpoint
    history: List[Dict]


def resolve_head(model_cfg: BackboneConfig, mode: str) -> BackboneConfig:
    cfg = copy.deepcopy(model_cfg)
    if cfg.head == "auto":
        cfg.head = "prototype" if mode == "ug2rlpr" else "linear"
    return cfg


def _check_dims(model_cfg: BackboneConfig, data: Dataset) -> None:
    C = data.train.images.shape[1]
    if C != model_cfg.in_channels:
        raise ContractError(f"model expects {model_cfg.in_channels} input channels, data has {C}")
    if data.num_classes != model_cfg.num_classes:
        raise ContractError(f"model has {model_cfg.num_classes} classes, data has {data.num_classes}")


def validation_metrics(model: Model, split: Split, mode: str) -> Dict[str, float]:
    preds = deterministic_predict(model, split.images, split.labels, mode=mode)
    return {
        "val_loss": nll(preds),
        "val_accuracy": accuracy(preds),
        "val_macro_f1": macro_f1(preds),
        "val_auroc": auroc(preds),
    }


def _improved(value: float, best: Optional[float], sign: int) -> bool:
    if value is None or math.isnan(value):
        return False
    return best is None or sign * value > sign * best


def _snapshot(model, opt, rng, epoch, config, meta) -> Checkpoint:
    return Checkpoint(
        config=copy.deepcopy(config),
        params=model.state_dict(),
        epoch=epoch,
        rng_state=copy.deepcopy(rng.bit_generator.state),
        meta=copy.deepcopy(meta),
        optimizer={k: v.copy() for k, v in opt.state().items()},
    )


def train(
    model_cfg: BackboneConfig,
    data: Dataset,
    cfg: TrainConfig,
    resume: Optional[Checkpoint] = None,
    epochs: Optional[int] = None,
) -> TrainResult:
    """Train with early stopping on ``cfg.monitor``.

    Args:
        model_cfg: Architecture; ``head="auto"`` resolves by ``cfg.mode``.
        data: Train/val/test splits (only train and val are used).
        cfg: Optimization settings.
        resume: Continue from a checkpoint's parameters, optimizer and RNG state.
        epochs: Total epoch budget; defaults to ``cfg.epochs``.

    Returns:
        Trained model (at its last state), best and last checkpoints, and the
        per-epoch history.

    Raises:
        DivergenceError: on a non-finite loss, carrying the last finite checkpoint.
    """
    cfg.validate()
    model_cfg = resolve_head(model_cfg, cfg.mode)
    _check_dims(model_cfg, data)
    config = {"model": model_cfg.to_dict(), "train": cfg.to_dict()}
    model = Model(model_cfg, seed=cfg.seed)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    sign = MONITORS[cfg.monitor]
    meta = {"step": 0, "best": None, "best_epoch": 0, "bad_epochs": 0, "history": []}
    start = 0
    if resume is not None:
        model.load_state_dict(resume.params)
        meta = copy.deepcopy(resume.meta)
        opt.load_state(resume.optimizer, meta["step"])
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        start = resume.epoch
    history = meta["history"]
    last = _snapshot(model, opt, rng, start, config, meta)
    best_ckpt = last
    total_epochs = cfg.epochs if epochs is None else epochs
    train_split = data.train
    n = len(train_split)
    use_masks = train_split.masks is not None and train_split.any_mask

    for epoch in range(start + 1, total_epochs + 1):
        if meta["bad_epochs"] >= cfg.patience:
            break
        perm = rng.permutation(n)
        sums = np.zeros(4)
        routed_count = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            batch = train_split.subset(idx)
            out = model.forward(
                batch.images,
                mode=cfg.mode,
                masks=batch.masks if use_masks else None,
                has_mask=batch.has_mask if use_masks else None,
                rng=rng,
            )
            parts = model_loss(model, out, batch.labels, cfg.weights)
            value = parts.total.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}", checkpoint=last)
            model.zero_grad()
            parts.total.backward()
            opt.step()
            row = parts.as_row()
            # each part is averaged over the samples it covers, so epoch means do not depend on batching
            supervised = float(batch.has_mask.sum()) if use_masks else 0.0
            sums += np.array([len(idx) * row["ce"], supervised * row["routing"], len(idx) * row["cluster"], len(idx) * row["diversity"]])
            routed_count += supervised
        train_row = _epoch_row(sums, n, routed_count, cfg.weights)
        val = validation_metrics(model, data.val, cfg.mode)
        record = {"epoch": epoch, **train_row, **val}
        history.append(record)
        meta["step"] = opt.step_count
        logger.info("epoch %d: %s", epoch, record)
        if _improved(val[cfg.monitor], meta["best"], sign):
            meta["best"], meta["best_epoch"], meta["bad_epochs"] = val[cfg.monitor], epoch, 0
            last = _snapshot(model, opt, rng, epoch, config, meta)
            best_ckpt = last
        else:
            meta["bad_epochs"] += 1
            last = _snapshot(model, opt, rng, epoch, config, meta)
    return TrainResult(model, best_ckpt, last, history)


def _epoch_row(sums: np.ndarray, n: int, routed_count: float, w: LossWeights) -> Dict[str, float]:
    ce, cluster, diversity = sums[0] / n, sums[2] / n, sums[3] / n
    routing = sums[1] / routed_count if routed_count else 0.0
    total = ce + w.route * routing
    total = total + w.cluster * cluster
    total = total + w.diversity * diversity
    return {
        "train_total": float(total),
        "train_ce": float(ce),
        "train_routing": float(routing),
        "train_cluster": float(cluster),
        "train_diversity": float(diversity),
    }


def write_history(history: List[Dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


def write_metric_rows(rows: List[Dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def evaluate(
    ckpt: Checkpoint,
    split: Split,
    mc: Optional[McConfig] = None,
    beta: Optional[float] = None,
    run_id: str = "",
    model: Optional[Model] = None,
):
    """Predictions and a metric row for ``split``.

    Without ``mc`` a single dropout-free pass is used; ``beta`` overrides the
    routing gate coefficient of every routed block at forward time.
    """
    model = model or ckpt.build_model()
    mcfg = model.cfg
    if split.images.shape[1] != mcfg.in_channels:
        raise LoadError(f"checkpoint expects {mcfg.in_channels} channels, split has {split.images.shape[1]}")
    if split.labels.size and split.labels.max() >= mcfg.num_classes:
        raise LoadError(f"labels exceed the checkpoint's {mcfg.num_classes} classes")
    mode = ckpt.train_config.mode
    if mc is None:
        preds = deterministic_predict(model, split.images, split.labels, mode=mode, beta=beta)
    else:
        preds = mc_predict(model, split.images, split.labels, mc, mode=mode, beta=beta).predictions
    return preds, metric_row(preds, run_id=run_id, beta=beta)
