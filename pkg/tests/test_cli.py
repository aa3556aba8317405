import csv
import io

import numpy as np
import pytest

from evroute.cli import KEY_TYPES, RunConfig, build_parser, main, read_config_file, resolve_config
from evroute.data import load_dataset, read_tensor, write_tensor
from evroute.metrics import METRIC_COLUMNS
from evroute.trainer import load_checkpoint

SPEC = ["--spec.image_size", "16", "--spec.train", "60", "--spec.val", "20", "--spec.test", "20", "--spec.seed", "4"]
TINY = [
    "--model.stem_channels", "4",
    "--model.dims", "8,8",
    "--model.depths", "1,1",
    "--model.heads", "2,2",
    "--model.downsample", "false,true",
    "--model.beta_schedule", "0,0.8",
    "--model.prototypes_per_class", "2",
    "--model.dropout", "0.1",
    "--train.batch_size", "20",
    "--train.seed", "2",
    "--mc.T", "3",
]


def rows_of(path_or_text):
    text = path_or_text.read_text() if hasattr(path_or_text, "read_text") else path_or_text
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen", "--out", str(out), *SPEC]) == 0
    return out


@pytest.fixture(scope="module")
def run(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run") / "r"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--mode", "ug2rlpr", "--train.epochs", "2", *TINY]) == 0
    return out


def test_gen_layout_and_idempotence(dataset, tmp_path):
    for split in ("train", "val", "test"):
        assert (dataset / split / "manifest.csv").exists()
    assert len(list((dataset / "train").glob("img_*.mftn"))) == 60
    again = tmp_path / "again"
    assert main(["gen", "--out", str(again), *SPEC]) == 0
    for f in sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file()):
        assert (again / f).read_bytes() == (dataset / f).read_bytes(), f


def test_gen_refuses_non_empty_dir(dataset, capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen", "--out", str(dataset), *SPEC])
    assert info.value.code == 2
    assert "--force" in capsys.readouterr().err


def test_gen_echoes_spec_override(tmp_path):
    out = tmp_path / "g"
    assert main(["gen", "--out", str(out), *SPEC, "--spec.ambiguity", "0.4"]) == 0
    assert "spec.ambiguity=0.4\n" in (out / "config.txt").read_text()


def test_train_run_layout(run):
    for name in ("config.txt", "history.csv", "metrics.csv", "checkpoints/best.mfur", "checkpoints/last.mfur"):
        assert (run / name).exists(), name
    assert (run / "explain").is_dir()
    hist = rows_of(run / "history.csv")
    assert [r["epoch"] for r in hist] == ["1", "2"]
    metrics = rows_of(run / "metrics.csv")
    assert [r["run_id"] for r in metrics] == ["ug2rlpr/det", "ug2rlpr/mc3"]


def test_baseline_and_ug2rlpr_rows_comparable(run, dataset, tmp_path):
    out = tmp_path / "base"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--mode", "baseline", "--train.epochs", "1", *TINY]) == 0
    a, b = rows_of(run / "metrics.csv"), rows_of(out / "metrics.csv")
    assert list(a[0]) == list(b[0]) == METRIC_COLUMNS
    assert b[0]["run_id"] == "baseline/det"


def test_train_is_byte_reproducible(run, dataset, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--mode", "ug2rlpr", "--train.epochs", "2", *TINY]) == 0
    for name in ("history.csv", "metrics.csv", "config.txt", "checkpoints/best.mfur", "checkpoints/last.mfur"):
        assert (out / name).read_bytes() == (run / name).read_bytes(), name


def test_train_lr_zero_constant_loss(dataset, tmp_path):
    out = tmp_path / "lr0"
    args = ["train", "--data", str(dataset), "--out", str(out), "--train.epochs", "3", "--train.patience", "5"]
    assert main([*args, *TINY, "--train.lr", "0", "--model.dropout", "0", "--mc.T", "0"]) == 0
    losses = [float(r["train_total"]) for r in rows_of(out / "history.csv")]
    # shuffled batches only change the float summation order
    assert max(losses) - min(losses) <= 1e-12 * abs(losses[0])


def test_train_missing_data_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--out", str(tmp_path / "x")])
    assert info.value.code == 2
    assert "--data" in capsys.readouterr().err


def test_unknown_key_named_in_error(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("train.learning_rate=0.1\n")
    with pytest.raises(SystemExit) as info:
        main(["train", "--data", str(dataset), "--out", str(tmp_path / "x"), "--config", str(cfg)])
    assert info.value.code == 2
    assert "train.learning_rate" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--data", str(dataset), "--out", str(tmp_path / "x"), "--train.learning_rate", "0.1"])
    assert "train.learning_rate" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_nonzero(dataset, tmp_path, capsys):
    out = tmp_path / "div"
    code = main(["train", "--data", str(dataset), "--out", str(out), "--train.epochs", "2", "--train.lr", "1e300", "--train.optimizer", "sgd", *TINY])
    assert code == 3
    assert "diverged" in capsys.readouterr().err
    assert (out / "checkpoints" / "last.mfur").exists()


def test_eval_prints_and_writes(run, dataset, tmp_path, capsys):
    ckpt = str(run / "checkpoints" / "best.mfur")
    assert main(["eval", "--ckpt", ckpt, "--data", str(dataset), "--deterministic"]) == 0
    printed = rows_of(capsys.readouterr().out)
    assert len(printed) == 1 and list(printed[0]) == METRIC_COLUMNS
    assert main(["eval", "--ckpt", ckpt, "--data", str(dataset), "--out", str(tmp_path / "e"), "--mc.T", "2"]) == 0
    curve = rows_of(tmp_path / "e" / "risk_coverage.csv")
    assert len(curve) == 20 and float(curve[-1]["coverage"]) == 1.0


def test_sweep_beta_rows_and_reproducibility(run, dataset, tmp_path):
    ckpt = str(run / "checkpoints" / "best.mfur")
    args = ["sweep-beta", "--ckpt", ckpt, "--data", str(dataset), "--betas", "0,0.4,0.8,1.0", "--mc.T", "3"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    raw = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert raw == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = rows_of(tmp_path / "a" / "metrics.csv")
    assert [float(r["beta"]) for r in rows] == [0.0, 0.4, 0.8, 1.0]
    for r in rows:
        assert list(r) == METRIC_COLUMNS
        assert all(r[c] != "" and np.isfinite(float(r[c])) for c in METRIC_COLUMNS[2:])


def test_sweep_single_beta_zero_matches_eval(run, dataset, capsys):
    ckpt = str(run / "checkpoints" / "best.mfur")
    assert main(["sweep-beta", "--ckpt", ckpt, "--data", str(dataset), "--betas", "0", "--deterministic"]) == 0
    sweep = rows_of(capsys.readouterr().out)
    assert len(sweep) == 1
    assert main(["eval", "--ckpt", ckpt, "--data", str(dataset), "--beta", "0", "--deterministic"]) == 0
    single = rows_of(capsys.readouterr().out)
    assert sweep[0]["ece"] == single[0]["ece"] and sweep[0]["nll"] == single[0]["nll"]


@pytest.mark.parametrize("betas", ["0,1.2", "-0.1", "a,b"])
def test_sweep_rejects_bad_beta(run, dataset, betas, capsys):
    with pytest.raises(SystemExit) as info:
        main(["sweep-beta", "--ckpt", str(run / "checkpoints" / "best.mfur"), "--data", str(dataset), "--betas", betas])
    assert info.value.code == 2


def test_sweep_retrain_option(run, dataset, tmp_path):
    out = tmp_path / "rt"
    args = ["sweep-beta", "--ckpt", str(run / "checkpoints" / "best.mfur"), "--data", str(dataset)]
    assert main([*args, "--betas", "0,1", "--retrain", "--deterministic", "--out", str(out)]) == 0
    rows = rows_of(out / "metrics.csv")
    assert [r["run_id"] for r in rows] == ["retrain/beta=0", "retrain/beta=1"]
    assert load_checkpoint(out / "checkpoints" / "beta_1.mfur").model_config.beta_schedule == [0.0, 1.0]


def test_explain_outputs_readable(run, dataset, tmp_path):
    out = tmp_path / "ex"
    img = dataset / "test" / "img_00000.mftn"
    assert main(["explain", "--ckpt", str(run / "checkpoints" / "best.mfur"), "--input", str(img), "--out", str(out)]) == 0
    sigma = read_tensor(out / "sigma_stage1_block0.mftn").data
    meff = read_tensor(out / "meff_stage1_block0.mftn").data
    assert sigma.shape == meff.shape == (2, 2)
    assert np.all((sigma > 0) & (sigma <= 1))
    matches = rows_of(out / "prototypes.csv")
    assert len(matches) == 5 and [int(r["rank"]) for r in matches] == [1, 2, 3, 4, 5]
    sims = [float(r["similarity"]) for r in matches]
    assert sims == sorted(sims, reverse=True)


def test_explain_zero_evidence_sigma_is_one(run, dataset, tmp_path):
    out = tmp_path / "zero"
    img = dataset / "test" / "img_00001.mftn"
    assert main(["explain", "--ckpt", str(run / "checkpoints" / "best.mfur"), "--input", str(img), "--out", str(out), "--zero-evidence"]) == 0
    assert np.all(read_tensor(out / "sigma_stage1_block0.mftn").data == 1.0)


def test_explain_linear_head_skips_prototypes(dataset, tmp_path, capsys):
    out = tmp_path / "lin"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--mode", "baseline", "--train.epochs", "1", *TINY]) == 0
    capsys.readouterr()
    ex = tmp_path / "lin_ex"
    img = dataset / "test" / "img_00000.mftn"
    assert main(["explain", "--ckpt", str(out / "checkpoints" / "best.mfur"), "--input", str(img), "--out", str(ex)]) == 0
    assert "no prototype head" in capsys.readouterr().err
    assert not (ex / "prototypes.csv").exists()


def test_explain_rejects_wrong_channels(run, tmp_path):
    bad = tmp_path / "rgb.mftn"
    write_tensor(np.zeros((3, 16, 16)), bad)
    assert main(["explain", "--ckpt", str(run / "checkpoints" / "best.mfur"), "--input", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_explain_top1_prototype_matches_confident_prediction(tmp_path):
    data = tmp_path / "d"
    spec = ["--spec.train", "240", "--spec.val", "40", "--spec.test", "40", "--spec.seed", "11", "--spec.ambiguity", "0.1"]
    assert main(["gen", "--out", str(data), *spec]) == 0
    run = tmp_path / "r"
    args = ["--model.preset", "toy", "--train.epochs", "12", "--train.lr", "2e-3", "--train.seed", "2", "--mc.T", "0"]
    assert main(["train", "--data", str(data), "--out", str(run), *args]) == 0
    model = load_checkpoint(run / "checkpoints" / "best.mfur").build_model()
    test = load_dataset(data).test
    logits = model.forward(test.images, mode="ug2rlpr").logits.data
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    confident = [i for i in np.argsort(-probs.max(1), kind="stable") if probs[i].argmax() == test.labels[i]]
    i = int(confident[0])
    assert probs[i].max() > 0.9
    ex = tmp_path / "ex"
    assert main(["explain", "--ckpt", str(run / "checkpoints" / "best.mfur"), "--input", str(data / "test" / f"img_{i:05d}.mftn"), "--out", str(ex)]) == 0
    top = rows_of(ex / "prototypes.csv")[0]
    pred = rows_of(ex / "prediction.csv")[0]
    assert int(top["class"]) == int(pred["predicted"]) == test.labels[i]


def test_preset_key_applies_before_model_keys(tmp_path):
    rc = resolve_config(None, {"model.dims": "16,32,64,128", "model.preset": "paper4stage"}, env={})
    assert rc.model.dims == [16, 32, 64, 128] and rc.model.depths == [2, 2, 2, 2]
    assert rc.dumps().startswith("model.preset=paper4stage\n")
    with pytest.raises(SystemExit):
        main(["gen", "--out", str(tmp_path / "x"), "--model.preset", "huge"])


def test_config_echo_round_trips(run):
    pairs = read_config_file(run / "config.txt")
    rc = RunConfig()
    for k, v in pairs:
        rc.set(k, v)
    echoed = resolve_config(str(run / "config.txt"), {}, env={})
    assert echoed.dumps() == (run / "config.txt").read_text()
    assert [k for k, _ in pairs] == ["model.preset", *KEY_TYPES]


def test_env_seed_is_last_resort():
    rc = resolve_config(None, {"train.seed": "9"}, env={"MFUR_SEED": "42"})
    assert rc.train.seed == 9 and rc.spec.seed == 42 and rc.mc.seed == 42
    assert resolve_config(None, {}, env={}).spec.seed == 0


def test_help_lists_every_key(capsys):
    parser = build_parser()
    for cmd in ("gen", "train", "eval", "sweep-beta", "explain"):
        with pytest.raises(SystemExit):
            parser.parse_args([cmd, "--help"])
        text = capsys.readouterr().out
        missing = [k for k in KEY_TYPES if f"--{k}" not in text]
        assert not missing, (cmd, missing)


def test_bad_value_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen", "--out", "unused", "--spec.train", "many"])
    assert info.value.code == 2
    assert "spec.train" in capsys.readouterr().err
