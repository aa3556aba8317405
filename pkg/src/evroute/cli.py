"""
Command-line front end: ``gen``, ``train``, ``eval``, ``sweep-beta``, ``explain``.

Every configuration field is addressable as a dotted key (``--train.lr 3e-4``,
``--model.dims 16,32``). Values can also come from a plain ``key=value`` file
passed with ``--config``; flags win over the file. ``MFUR_SEED`` supplies the
seeds of any section whose seed was not set explicitly.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import os
import shutil
import sys
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .backbone import BackboneConfig
from .backbone import preset as backbone_preset
from .data import SyntheticSpec, generate, load_dataset, load_image, save_dataset, write_tensor
from .errors import ContractError, DivergenceError, FormatError, LoadError
from .evidential import softmax_predict
from .metrics import METRIC_COLUMNS, McConfig, risk_coverage
from .objectives import LossWeights
from .prototypes import top_matches
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train, write_history, write_metric_rows

logger = logging.getLogger("evroute")

SECTIONS = {
    "model": BackboneConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "spec": SyntheticSpec,
    "mc": McConfig,
}
SEEDED = ("train.seed", "spec.seed", "mc.seed")
PRESET_KEY = "model.preset"


class UsageError(Exception):
    pass


# ------------------------------------------------------------- run config
def _field_types(cls) -> Dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.name != "weights"}


KEY_TYPES: Dict[str, object] = {
    f"{sec}.{name}": tp for sec, cls in SECTIONS.items() for name, tp in _field_types(cls).items()
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_scalar(tp, text: str):
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text.strip()


def parse_value(key: str, text: str):
    tp = KEY_TYPES[key]
    try:
        if typing.get_origin(tp) in (list, List):
            (inner,) = typing.get_args(tp)
            text = text.strip()
            return [] if not text else [_parse_scalar(inner, part) for part in text.split(",")]
        return _parse_scalar(tp, text)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    model: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    mc: McConfig = field(default_factory=McConfig)
    explicit: set = field(default_factory=set)
    preset: str = "toy"

    def set(self, key: str, text: str) -> None:
        if key == PRESET_KEY:
            # replaces every model field, so callers apply it before other model keys
            try:
                self.model = backbone_preset(text.strip())
            except ContractError as exc:
                raise UsageError(str(exc)) from None
            self.preset = text.strip()
            return
        if key not in KEY_TYPES:
            raise UsageError(f"unknown config key: {key}")
        sec, name = key.split(".", 1)
        setattr(getattr(self, sec), name, parse_value(key, text))
        self.explicit.add(key)

    def get(self, key: str):
        if key == PRESET_KEY:
            return self.preset
        sec, name = key.split(".", 1)
        return getattr(getattr(self, sec), name)

    def items(self):
        for key in KEY_TYPES:
            yield key, self.get(key)

    def dumps(self) -> str:
        head = f"{PRESET_KEY}={self.preset}\n"
        return head + "".join(f"{k}={format_value(v)}\n" for k, v in self.items())

    def train_config(self) -> TrainConfig:
        cfg = copy.deepcopy(self.train)
        cfg.weights = copy.deepcopy(self.loss)
        return cfg


def read_config_file(path) -> List[tuple]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    pairs = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value))
    return pairs


def resolve_config(config_file: Optional[str], overrides: Dict[str, str], env=None) -> RunConfig:
    """Defaults, then the config file, then flag overrides; finally the env seed."""
    env = os.environ if env is None else env
    rc = RunConfig()
    pairs = (read_config_file(config_file) if config_file else []) + list(overrides.items())
    for key, value in pairs:
        if key == PRESET_KEY:
            rc.set(key, value)
    for key, value in pairs:
        if key != PRESET_KEY:
            rc.set(key, value)
    seed = env.get("MFUR_SEED")
    if seed is not None:
        for key in SEEDED:
            if key not in rc.explicit:
                rc.set(key, seed)
    return rc


# ---------------------------------------------------------------- helpers
def _write_rows_stdout(rows: List[Dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    sys.stdout.write(buf.getvalue())


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _mc_or_none(rc: RunConfig, deterministic: bool) -> Optional[McConfig]:
    return None if deterministic else rc.mc


def _parse_betas(text: str) -> List[float]:
    try:
        betas = [float(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--betas must be a comma-separated list of numbers, got {text!r}") from None
    if not betas:
        raise UsageError("--betas is empty")
    for b in betas:
        if not 0.0 <= b <= 1.0:
            raise UsageError(f"beta {b} outside [0, 1]")
    return betas


# --------------------------------------------------------------- commands
def cmd_gen(args, rc: RunConfig) -> int:
    out = Path(args.out)
    rc.spec.validate()
    _prepare_out(out, args.force)
    save_dataset(generate(rc.spec), out)
    (out / "config.txt").write_text(rc.dumps(), encoding="utf-8")
    print(f"wrote dataset to {out}")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    if args.mode:
        rc.set("train.mode", args.mode)
    data = load_dataset(args.data)
    if "model.in_channels" not in rc.explicit:
        rc.model.in_channels = int(data.train.images.shape[1])
    if "model.num_classes" not in rc.explicit:
        rc.model.num_classes = data.num_classes
    out = Path(args.out)
    _prepare_out(out, args.force)
    (out / "checkpoints").mkdir()
    (out / "explain").mkdir()
    (out / "config.txt").write_text(rc.dumps(), encoding="utf-8")
    tcfg = rc.train_config()
    try:
        result = train(rc.model, data, tcfg)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoints" / "last.mfur")
            write_history(exc.checkpoint.meta.get("history", []), out / "history.csv")
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    write_history(result.history, out / "history.csv")
    save_checkpoint(result.best, out / "checkpoints" / "best.mfur")
    save_checkpoint(result.last, out / "checkpoints" / "last.mfur")
    rows = []
    model = result.best.build_model()
    _, row = evaluate(result.best, data.test, None, run_id=f"{tcfg.mode}/det", model=model)
    rows.append(row)
    if rc.mc.T > 0:
        _, row = evaluate(result.best, data.test, rc.mc, run_id=f"{tcfg.mode}/mc{rc.mc.T}", model=model)
        rows.append(row)
    write_metric_rows(rows, out / "metrics.csv")
    print(f"best epoch {result.best.epoch}; run written to {out}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data, num_classes=ckpt.model_config.num_classes)
    split = data[args.split]
    run_id = f"{ckpt.train_config.mode}/{args.split}"
    preds, row = evaluate(ckpt, split, _mc_or_none(rc, args.deterministic), beta=args.beta, run_id=run_id)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metric_rows([row], out / "metrics.csv")
        rc_curve = risk_coverage(preds)
        with open(out / "risk_coverage.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["coverage", "risk"])
            w.writerows((repr(float(c)), repr(float(r))) for c, r in zip(rc_curve.coverage, rc_curve.risk))
    else:
        _write_rows_stdout([row])
    return 0


def cmd_sweep_beta(args, rc: RunConfig) -> int:
    betas = _parse_betas(args.betas)
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data, num_classes=ckpt.model_config.num_classes)
    split = data[args.split]
    mc = _mc_or_none(rc, args.deterministic)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    model = None if args.retrain else ckpt.build_model()
    for beta in betas:
        if args.retrain:
            mcfg = ckpt.model_config
            mcfg.beta_schedule = [beta if si >= mcfg.ugtr_from_stage else b for si, b in enumerate(mcfg.beta_schedule)]
            result = train(mcfg, data, ckpt.train_config)
            if out is not None:
                (out / "checkpoints").mkdir(exist_ok=True)
                save_checkpoint(result.best, out / "checkpoints" / f"beta_{beta:g}.mfur")
            _, row = evaluate(result.best, split, mc, run_id=f"retrain/beta={beta:g}")
            row["beta"] = beta
        else:
            _, row = evaluate(ckpt, split, mc, beta=beta, run_id=f"beta={beta:g}", model=model)
        rows.append(row)
    if out is not None:
        write_metric_rows(rows, out / "metrics.csv")
        (out / "config.txt").write_text(rc.dumps(), encoding="utf-8")
    else:
        _write_rows_stdout(rows)
    return 0


def cmd_explain(args, rc: RunConfig) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    image = load_image(args.input)
    if image.shape[0] != model.cfg.in_channels:
        raise LoadError(f"checkpoint expects {model.cfg.in_channels} channels, image has {image.shape[0]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = ckpt.train_config.mode
    res = model.forward(image[None], mode=mode, beta=args.beta, zero_evidence=args.zero_evidence)
    probs = softmax_predict(res.logits).data[0]
    with open(out / "prediction.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predicted", *[f"p{c}" for c in range(len(probs))]])
        w.writerow([int(np.argmax(probs)), *[repr(float(p)) for p in probs]])
    if not res.aux:
        print("notice: no routed blocks in this model/mode; uncertainty maps skipped", file=sys.stderr)
    for (si, bi), aux in zip(model.routed_positions(), res.aux):
        grid = res.grids[si]
        sigma = aux.state.token_uncertainty.data[0].reshape(grid.H, grid.W)
        m_eff = aux.routing.effective_mask.data[0].reshape(grid.H, grid.W)
        write_tensor(sigma, out / f"sigma_stage{si}_block{bi}.mftn")
        write_tensor(m_eff, out / f"meff_stage{si}_block{bi}.mftn")
    if not model.has_prototypes:
        print("notice: checkpoint has no prototype head; similarity export skipped", file=sys.stderr)
        return 0
    bank = model.prototype_head
    n = min(args.top, bank.total)
    W = res.grids[-1].W
    with open(out / "prototypes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "prototype", "class", "token", "row", "col", "similarity"])
        for rank, m in enumerate(top_matches(res.tokens, bank, n)[0], 1):
            w.writerow([rank, m.prototype, m.cls, m.token, m.token // W, m.token % W, repr(m.similarity)])
    return 0


# ----------------------------------------------------------------- parser
def _add_config_keys(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (flags override it)")
    group = p.add_argument_group("configuration keys")
    defaults = RunConfig()
    group.add_argument(f"--{PRESET_KEY}", dest=f"cfg:{PRESET_KEY}", metavar="NAME", default=argparse.SUPPRESS, help="toy or paper4stage; applied before other model keys")
    for key in KEY_TYPES:
        group.add_argument(
            f"--{key}",
            dest=f"cfg:{key}",
            metavar="V",
            default=argparse.SUPPRESS,
            help=f"default {format_value(defaults.get(key))}",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evroute", description="Synthetic data, training, evaluation and explanation exports for uncertainty-gated routing models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["baseline", "ug2rlpr"])
    p.add_argument("--force", action="store_true", help="replace a non-empty run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--beta", type=float, help="gate coefficient override for all routed blocks")
    p.add_argument("--deterministic", action="store_true", help="single dropout-free pass instead of MC dropout")
    p.add_argument("--out", help="directory for metrics.csv and risk_coverage.csv (default: print to stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-beta", help="metric rows for a list of gate coefficients")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--betas", default="0,0.4,0.8,1.0")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--retrain", action="store_true", help="train a fresh model per beta instead of reusing the checkpoint")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", help="directory for metrics.csv (default: print to stdout)")
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("explain", help="uncertainty maps and prototype matches for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="PGM or tensor file")
    p.add_argument("--out", required=True)
    p.add_argument("--top", type=int, default=5, help="number of prototype matches")
    p.add_argument("--beta", type=float)
    p.add_argument("--zero-evidence", action="store_true", help="force zero evidence in every head")
    p.set_defaults(func=cmd_explain)

    for p in sub.choices.values():
        _add_config_keys(p)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    try:
        rc = resolve_config(args.config, overrides)
        if getattr(args, "beta", None) is not None and not 0.0 <= args.beta <= 1.0:
            raise UsageError(f"beta {args.beta} outside [0, 1]")
        return args.func(args, rc)
    except UsageError as exc:
        parser.error(str(exc))
    except (ContractError, FormatError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
