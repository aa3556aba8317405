"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL`` line (visible with
``pytest -v`` because the print bypasses capture) before asserting.
"""

import math
import time

import numpy as np
import pytest

from evroute.backbone import Model, preset
from evroute.cli import main
from evroute.data import SyntheticSpec, generate, load_dataset
from evroute.evidential import dirichlet_state, expected_probs
from evroute.metrics import (
    METRIC_COLUMNS,
    McConfig,
    PredictionSet,
    brier,
    ece,
    mce,
    nll,
    risk_coverage,
)
from evroute.objectives import LossWeights, model_loss
from evroute.prototypes import PrototypeBank, class_logits, cluster_loss, diversity_loss, similarity
from evroute.routing import refine
from evroute.trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

from conftest import tiny_config


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


# ---------------------------------------------------------------- 1
def _fd_sweep(model, loss_fn, h=1e-3):
    """Worst relative error over parameters whose abs error exceeds 1e-5."""
    model.zero_grad()
    loss_fn().backward()
    worst, failures, count = 0.0, [], 0
    for name, p in model.named_parameters():
        # detached evidential heads receive no gradient at all
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num)
            rel = err / max(abs(a), abs(num), 1e-300)
            count += 1
            if err > 1e-5:
                worst = max(worst, rel)
                if rel > 1e-3:
                    failures.append((name, i, a, num))
    return worst, failures, count


def test_criterion_1_gradient_integrity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 1, 16, 16))
    masks = (rng.random((2, 16, 16)) < 0.5).astype(float)
    has_mask = np.array([True, True])
    y = np.array([0, 2])
    w = LossWeights(0.3, 0.1, 0.05)
    lines, ok = [], True
    names = set()
    primary_seconds = None
    for head, detach in (("prototype", False), ("prototype", True), ("linear", False)):
        cfg = tiny_config(
            head=head,
            detach_sigma=detach,
            downsample=[False, False],
            beta_schedule=[0.0, 0.8],
            attention_kind="full",
            dropout=0.0,
        )
        model = Model(cfg, seed=3)
        sigma = None
        if detach:
            # detached sigma is a constant of the graph; freeze it for the finite differences
            ref = model.forward(x, masks=masks, has_mask=has_mask)
            sigma = [a.state.token_uncertainty.data.copy() for a in ref.aux]

        def loss():
            out = model.forward(x, masks=masks, has_mask=has_mask, sigma_override=sigma)
            return model_loss(model, out, y, w).total

        assert model.forward(x).grids[-1].H == 4
        names |= {n for n, _ in model.named_parameters()}
        worst, failures, count = _fd_sweep(model, loss)
        if primary_seconds is None:
            primary_seconds = time.perf_counter() - start
        ok &= not failures
        lines.append(f"{head}/detach={detach}: {count} params, worst rel {worst:.2e}, {len(failures)} bad")
    ok &= primary_seconds <= 60
    report(1, ok, "; ".join(lines) + f"; first sweep {primary_seconds:.1f}s")
    parts = ("stem", "attn", "mlp", "evidential", "routing_predictor", "refinement_branch", "lambda_ref", "prototypes", "log_temperature", "classifier")
    assert all(any(p in n for n in names) for p in parts), names
    assert ok


# ---------------------------------------------------------------- 2
def test_criterion_2_evidential_invariants(report):
    rng = np.random.default_rng(1)
    worst_sum, ok = 0.0, True
    for trial in range(1000):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(2, 6)))
        e = rng.exponential(scale=10.0 ** rng.uniform(-3, 3), size=shape)
        e[rng.random(shape) < 0.2] = 0.0
        st = dirichlet_state(e)
        worst_sum = max(worst_sum, float(np.max(np.abs(expected_probs(st).data.sum(-1) - 1.0))))
        sig = st.token_uncertainty.data
        ok &= bool(np.all((sig > 0) & (sig <= 1)))
        zero = e.sum(-1) == 0
        ok &= bool(np.all(sig[zero] == 1.0))
        ok &= bool(np.all(dirichlet_state(np.zeros(shape)).token_uncertainty.data == 1.0))
        scaled = dirichlet_state(e * 10).token_uncertainty.data
        ok &= bool(np.all(scaled[~zero] < sig[~zero]))
    ok &= worst_sum <= 1e-9
    report(2, ok, f"1000 tensors, max |sum E[p] - 1| = {worst_sum:.1e}")
    assert ok


# ---------------------------------------------------------------- 3
def test_criterion_3_routing_fallback(report):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 1, 16, 16))
    worst = 0.0
    for head in ("prototype", "linear"):
        model = Model(tiny_config(head=head, dropout=0.0), seed=1)
        base = model.forward(x, mode="baseline").logits.data
        fallback = model.forward(x, mode="ug2rlpr", beta=1.0, zero_evidence=True).logits.data
        worst = max(worst, float(np.max(np.abs(base - fallback))))
    violations = 0
    for _ in range(500):
        B, N, D = rng.integers(1, 4), rng.integers(1, 10), rng.integers(1, 6)
        A, R = rng.normal(size=(B, N, D)), rng.normal(size=(B, N, D))
        m_eff = rng.random((B, N))
        delta, gated, _ = refine(A, R, m_eff, rng.normal(), float(rng.random()), rng.random(B))
        violations += int(np.sum(np.abs(gated.data) > np.abs(delta.data)))
    ok = worst <= 1e-12 and violations == 0
    report(3, ok, f"max |ug2rlpr(sigma=1, beta=1) - baseline| = {worst:.1e}; |gated| > |delta| in {violations} entries")
    assert ok


# ---------------------------------------------------------------- 4
def test_criterion_4_prototype_aggregation(report):
    rng = np.random.default_rng(3)
    bound_bad, worst_cl, worst_dv = 0, 0.0, 0.0
    for trial in range(100):
        B, Tn, D = int(rng.integers(1, 4)), int(rng.integers(1, 10)), int(rng.integers(2, 7))
        C, K = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        scope = ("within_class", "global")[trial % 2]
        bank = PrototypeBank(C, D, rng, per_class=K, log_temperature=rng.uniform(-1, 3), div_scope=scope, q=float(rng.choice([1, 2, 3])))
        s = similarity(rng.normal(size=(B, Tn, D)), bank).data
        logits = class_logits(s, bank).data
        for b in range(B):
            for c in range(C):
                best = max(s[b, t, c * K + k] for t in range(Tn) for k in range(K))
                if not best - 1e-12 <= logits[b, c] <= best + math.log(Tn * K) + 1e-12:
                    bound_bad += 1
        cl = -sum(max(s[b, t, k] for t in range(Tn)) for b in range(B) for k in range(C * K)) / (B * C * K)
        worst_cl = max(worst_cl, abs(cluster_loss(s).item() - cl))
        P = bank.prototypes.data
        terms = []
        for i in range(C * K):
            for j in range(C * K):
                if i != j and (scope == "global" or i // K == j // K):
                    cos = float(P[i] @ P[j]) / (math.sqrt(float(P[i] @ P[i])) * math.sqrt(float(P[j] @ P[j])))
                    terms.append(abs(cos) ** bank.q)
        dv = sum(terms) / len(terms) if terms else 0.0
        worst_dv = max(worst_dv, abs(diversity_loss(bank).item() - dv))
    ok = bound_bad == 0 and worst_cl <= 1e-12 and worst_dv <= 1e-12
    report(4, ok, f"bound violations {bound_bad}; cluster err {worst_cl:.1e}; diversity err {worst_dv:.1e}")
    assert ok


# ---------------------------------------------------------------- 5
def _ref_bins(conf, correct, bins=15):
    out = []
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        members = [i for i in range(len(conf)) if (lo < conf[i] <= hi) or (b == 0 and conf[i] == 0)]
        if members:
            acc = sum(correct[i] for i in members) / len(members)
            cf = sum(conf[i] for i in members) / len(members)
            out.append((len(members), abs(acc - cf)))
    return out


def _reference(probs, labels, score):
    n, C = probs.shape
    conf = [max(r) for r in probs]
    pred = [int(np.argmax(r)) for r in probs]
    correct = [pred[i] == labels[i] for i in range(n)]
    bins = _ref_bins(conf, correct)
    ref = {
        "ece": sum(cnt / n * gap for cnt, gap in bins),
        "mce": max(gap for _, gap in bins),
        "brier": sum(sum((probs[i][c] - (c == labels[i])) ** 2 for c in range(C)) for i in range(n)) / n,
        "nll": sum(-math.log(max(probs[i][labels[i]], 1e-12)) for i in range(n)) / n,
    }
    order = sorted(range(n), key=lambda i: (score[i], i))
    risks = [sum(not correct[j] for j in order[:k]) / k for k in range(1, n + 1)]
    ref["aurc"] = sum(risks) / n
    for c in (0.5, 0.7, 0.9):
        k = max(1, math.ceil(c * n - 1e-9))
        ref[c] = 1 - risks[k - 1]
    return ref


def test_criterion_5_metric_oracles(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(200):
        n, C = int(rng.integers(1, 65)), int(rng.integers(2, 6))
        logits = rng.normal(scale=rng.uniform(0.1, 5), size=(n, C))
        if trial % 3 == 0:
            logits = np.round(logits)
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        labels = rng.integers(0, C, n)
        score = rng.integers(0, 4, n).astype(float) if trial % 2 else None
        preds = PredictionSet(probs, labels, score)
        ref = _reference(probs, labels, preds.score)
        rc = risk_coverage(preds)
        got = {"ece": ece(preds), "mce": mce(preds), "brier": brier(preds), "nll": nll(preds), "aurc": rc.aurc, **rc.acc_at}
        worst = max(worst, max(abs(got[k] - ref[k]) for k in ref))
    # hand cases
    hand = PredictionSet(np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.8, 0.2]]), np.array([0, 1, 1, 0]))
    hand_ok = (
        abs(ece(hand) - 0.3) < 1e-15
        and abs(mce(hand) - 0.6) < 1e-15
        and abs(brier(hand) - (0.02 + 0.72 + 0.18 + 0.08) / 4) < 1e-15
        and risk_coverage(hand).acc_at[0.5] == 1.0
        and abs(risk_coverage(hand).aurc - (0 + 0 + 0 + 0.25) / 4) < 1e-15
    )
    ok = worst <= 1e-12 and hand_ok
    report(5, ok, f"200 sets, max deviation {worst:.1e}; hand cases {'hold' if hand_ok else 'broken'}")
    assert ok


# ------------------------------------------------------------- 6 and 7
@pytest.fixture(scope="module")
def trend_run():
    start = time.perf_counter()
    data = generate(SyntheticSpec(classes=3, train=800, val=200, test=200, image_size=32, ambiguity=0.25, seed=7))
    cfg = preset("toy", in_channels=1, num_classes=3)
    out = {}
    for mode in ("baseline", "ug2rlpr"):
        res = train(cfg, data, TrainConfig(epochs=30, mode=mode))
        preds, row = evaluate(res.best, data.test, McConfig(T=20))
        out[mode] = (res, preds, row)
    out["seconds"] = time.perf_counter() - start
    return out


def test_criterion_6_end_to_end_trend(report, trend_run):
    _, _, ug = trend_run["ug2rlpr"]
    _, _, base = trend_run["baseline"]
    acc_ok = ug["accuracy"] >= 0.90
    ece_ok = ug["ece"] <= base["ece"]
    time_ok = trend_run["seconds"] <= 600
    ok = acc_ok and ece_ok and time_ok
    report(
        6,
        ok,
        f"ug2rlpr acc {ug['accuracy']:.3f} (>= 0.90: {acc_ok}); MC-20 ECE ug2rlpr {ug['ece']:.4f} vs baseline "
        f"{base['ece']:.4f} ({'<=' if ece_ok else '>'}); both runs {trend_run['seconds']:.0f}s",
    )
    assert ok


def test_criterion_7_selective_prediction(report, trend_run):
    _, preds, _ = trend_run["ug2rlpr"]
    assert preds.uncertainty_score is not None
    rc = risk_coverage(preds)
    full = float(np.mean(preds.correct))
    rng = np.random.default_rng(20)
    shuffled = [risk_coverage(PredictionSet(preds.probs, preds.labels, rng.permutation(len(preds.labels)).astype(float))).aurc for _ in range(20)]
    random_aurc = float(np.mean(shuffled))
    acc_ok = rc.acc_at[0.5] >= full
    aurc_ok = rc.aurc <= random_aurc
    ok = acc_ok and aurc_ok
    report(
        7,
        ok,
        f"sigma ranking acc@50 {rc.acc_at[0.5]:.3f} vs acc@100 {full:.3f}; AURC {rc.aurc:.4f} vs random {random_aurc:.4f}",
    )
    assert ok


# ---------------------------------------------------------------- 8 and 9
SMALL_SPEC = ["--spec.train", "120", "--spec.val", "40", "--spec.test", "40", "--spec.seed", "7"]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc") / "data"
    assert main(["gen", "--out", str(out), *SMALL_SPEC]) == 0
    return out


def test_criterion_8_determinism(report, small_data, tmp_path):
    args = ["train", "--data", str(small_data), "--mode", "ug2rlpr", "--train.epochs", "3", "--mc.T", "5"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    files = ["history.csv", "checkpoints/best.mfur", "checkpoints/last.mfur"]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    data = load_dataset(small_data)
    cfg = preset("toy", in_channels=1, num_classes=3)
    tcfg = TrainConfig(epochs=2, patience=5)
    straight = train(cfg, data, tcfg)
    first = train(cfg, data, TrainConfig(epochs=1, patience=5))
    save_checkpoint(first.last, tmp_path / "e1.mfur")
    resumed = train(cfg, data, tcfg, resume=load_checkpoint(tmp_path / "e1.mfur"))
    save_checkpoint(straight.last, tmp_path / "s.mfur")
    save_checkpoint(resumed.last, tmp_path / "r.mfur")
    bitwise = (tmp_path / "s.mfur").read_bytes() == (tmp_path / "r.mfur").read_bytes()
    ok = same and bitwise
    report(8, ok, f"repeat run byte-identical: {same}; save/load/resume one epoch bitwise: {bitwise}")
    assert ok


def test_criterion_9_beta_sweep(report, small_data, tmp_path):
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path / "run"), "--train.epochs", "2", "--mc.T", "0"]) == 0
    ckpt = str(tmp_path / "run" / "checkpoints" / "best.mfur")
    args = ["sweep-beta", "--ckpt", ckpt, "--data", str(small_data), "--betas", "0,0.4,0.8,1.0", "--mc.T", "20"]
    assert main([*args, "--out", str(tmp_path / "s1")]) == 0
    assert main([*args, "--out", str(tmp_path / "s2")]) == 0
    raw = (tmp_path / "s1" / "metrics.csv").read_text()
    same = raw == (tmp_path / "s2" / "metrics.csv").read_text()
    lines = raw.strip().split("\n")
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    families = {"auroc", "accuracy", "macro_f1", "ece", "brier", "nll", "mce", "aurc", "acc@50", "acc@70", "acc@90"}
    complete = header == METRIC_COLUMNS and families <= set(header) and all(
        all(r[c] != "" and math.isfinite(float(r[c])) for c in families) for r in rows
    )
    betas = [float(r["beta"]) for r in rows]
    ok = len(rows) == 4 and betas == [0.0, 0.4, 0.8, 1.0] and complete and same
    report(9, ok, f"{len(rows)} rows, betas {betas}, schema complete: {complete}, byte-identical rerun: {same}")
    assert ok
