import hashlib
import io

import pytest

from pneumocnn import cli
from pneumocnn.model import ModelConfig, build_model, checkpoint_bytes
from pneumocnn.ontology import FURTHER_INVESTIGATION, PNEUMONIA_DETECTED, default_ontology_text
from pneumocnn.tensor import PCG32


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main([str(a) for a in argv], stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def _digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--n", 8, "--seed", 0, "--out", d)[0] == 0
    return d


@pytest.fixture(scope="module")
def trained(synth, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    before = _digest(synth)
    result = run("train", "--manifest", synth / "manifest.txt", "--out", d, "--seed", 0, "--set", "max_epochs=5")
    assert _digest(synth) == before
    return d, result


def _checkpoint(tmp_path, bias):
    """Default-sized model whose output is sigmoid(bias) for every input."""
    m = build_model(ModelConfig(), PCG32(0))
    m.layers[-2].params["weight"][...] = 0
    m.layers[-2].params["bias"][...] = bias
    path = tmp_path / f"bias{bias}.ckpt"
    path.write_bytes(checkpoint_bytes(m))
    return path


# --- synth -----------------------------------------------------------------

def test_synth_writes_images_and_manifest(synth, tmp_path):
    files = sorted(p.name for p in synth.iterdir())
    assert len([f for f in files if f.endswith(".ppm")]) == 16 and "manifest.txt" in files
    assert len((synth / "manifest.txt").read_text().splitlines()) == 16
    assert run("synth", "--n", 8, "--seed", 0, "--out", tmp_path)[0] == 0
    assert _digest(tmp_path) == _digest(synth)


def test_synth_errors(tmp_path):
    code, _, err = run("synth", "--n", 0, "--out", tmp_path)
    assert code == 2 and err.startswith("usage:")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run("synth", "--out", blocker / "sub")
    assert code == 4 and err.startswith("io:")


# --- train -----------------------------------------------------------------

def test_train_smoke_run(trained):
    d, (code, out, err) = trained
    assert code == 0, err
    assert (d / "model.ckpt").read_bytes()[:5] == b"PNEU1"
    assert len((d / "history.csv").read_text().splitlines()) == 6
    assert (d / "curves.svg").exists()
    assert [line.split()[:2] for line in out.splitlines()[:5]] == [["epoch", str(e)] for e in range(1, 6)]
    sizes = [len((d / f"{s}_manifest.txt").read_text().splitlines()) for s in ("train", "val", "test")]
    assert sum(sizes) == 16


def test_train_missing_manifest(tmp_path):
    code, _, err = run("train", "--manifest", tmp_path / "nope.txt", "--out", tmp_path)
    assert code == 2 and err.startswith("data:")


def test_train_bad_config_value(synth, tmp_path):
    code, _, err = run("train", "--manifest", synth / "manifest.txt", "--out", tmp_path, "--set", "batch_size=0")
    assert code == 2 and err.startswith("config:")


# --- evaluate --------------------------------------------------------------

def test_evaluate_trained_checkpoint(trained):
    d, _ = trained
    code, out, err = run("evaluate", "--checkpoint", d / "model.ckpt", "--manifest", d / "test_manifest.txt",
                         "--out", d / "eval")
    assert code == 0, err
    keys = [line.split()[0] for line in out.splitlines()]
    assert keys[:8] == ["tn", "fp", "fn", "tp", "accuracy", "precision", "recall", "f1"]
    assert (d / "eval" / "metrics.csv").exists()


def test_evaluate_corrupt_checkpoint(tmp_path, synth):
    ckpt = _checkpoint(tmp_path, 5.0)
    blob = bytearray(ckpt.read_bytes())
    blob[-50] ^= 0xFF
    ckpt.write_bytes(bytes(blob))
    code, _, err = run("evaluate", "--checkpoint", ckpt, "--manifest", synth / "manifest.txt", "--out", tmp_path)
    assert code == 3 and err.startswith("checkpoint:")


def test_evaluate_single_class_warns(tmp_path, synth):
    lines = [line for line in (synth / "manifest.txt").read_text().splitlines() if line.startswith("pneumonia")][:2]
    (synth / "pos_only.txt").write_text("\n".join(lines) + "\n")
    try:
        code, out, err = run("evaluate", "--checkpoint", _checkpoint(tmp_path, 5.0),
                             "--manifest", synth / "pos_only.txt", "--out", tmp_path / "e")
    finally:
        (synth / "pos_only.txt").unlink()
    assert code == 0 and "warning:" in err
    assert "tp 2" in out and "accuracy 1.0000" in out and "auc" not in out
    assert not (tmp_path / "e" / "roc.csv").exists()


def test_evaluate_empty_manifest(tmp_path):
    (tmp_path / "empty.txt").write_text("")
    code, _, err = run("evaluate", "--checkpoint", _checkpoint(tmp_path, 5.0), "--manifest", tmp_path / "empty.txt",
                       "--out", tmp_path)
    assert code == 2 and err.startswith("data:")


# --- diagnose ----------------------------------------------------------------

def _diagnose(tmp_path, synth, bias, *extra):
    code, out, err = run("diagnose", "--checkpoint", _checkpoint(tmp_path, bias),
                         "--image", synth / "pneumonia_000.ppm", *extra)
    assert code == 0, err
    return dict(line.split(" ", 1) for line in out.splitlines())


def test_diagnose_detects(tmp_path, synth):
    report = _diagnose(tmp_path, synth, 5.0, "--meta", "fever=yes", "--age", 30)
    assert report["p_cnn"] == "0.9933"
    assert report["findings"] == "InfectionPattern LungOpacity"
    assert report["trace"] == "R1"
    assert "Pneumonia" in report["inferred"].split()
    assert report["verdict"] == PNEUMONIA_DETECTED


def test_diagnose_without_rule(tmp_path, synth):
    text = default_ontology_text().replace("rule R1", "# rule R1")
    (tmp_path / "norule.onto").write_text(text)
    report = _diagnose(tmp_path, synth, 5.0, "--meta", "fever=yes", "--ontology", tmp_path / "norule.onto")
    assert report["trace"] == "-" and report["verdict"] == FURTHER_INVESTIGATION


def test_diagnose_low_probability(tmp_path, synth):
    report = _diagnose(tmp_path, synth, -5.0, "--meta", "fever=yes")
    assert report["findings"] == "InfectionPattern" and report["verdict"] == FURTHER_INVESTIGATION


def test_diagnose_threshold_flag(tmp_path, synth):
    # sigmoid(1.1) = 0.7503 clears the default 0.7 but not a 0.8 threshold
    assert _diagnose(tmp_path, synth, 1.1, "--meta", "cough=yes")["verdict"] == PNEUMONIA_DETECTED
    assert _diagnose(tmp_path, synth, 1.1, "--meta", "cough=yes", "--threshold", 0.8)["verdict"] == FURTHER_INVESTIGATION


def test_diagnose_undecodable_image(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P6\nnot an image")
    code, _, err = run("diagnose", "--checkpoint", _checkpoint(tmp_path, 5.0), "--image", tmp_path / "bad.ppm")
    assert code == 2 and err.startswith("decode:")


# --- metrics ---------------------------------------------------------------

def _predictions(tmp_path):
    rows = ["p,label"] + ["0.1,0"] * 191 + ["0.9,0"] * 43 + ["0.1,1"] * 13 + ["0.9,1"] * 377
    path = tmp_path / "pred.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


def test_metrics_reproduces_counts(tmp_path):
    code, out, _ = run("metrics", _predictions(tmp_path))
    assert code == 0
    lines = out.splitlines()
    assert lines[:8] == ["tn 191", "fp 43", "fn 13", "tp 377",
                         "accuracy 0.9103", "precision 0.8976", "recall 0.9667", "f1 0.9309"]


def test_metrics_threshold_flag(tmp_path):
    code, out, _ = run("metrics", _predictions(tmp_path), "--threshold", 1.1)
    assert code == 0
    assert out.splitlines()[:4] == ["tn 234", "fp 0", "fn 390", "tp 0"]


@pytest.mark.parametrize("text", ["", "0.5,1\nabc,1\n", "0.5\n", "0.5,2\n", "1.5,1\n"])
def test_metrics_malformed(tmp_path, text):
    (tmp_path / "p.csv").write_text(text)
    code, _, err = run("metrics", tmp_path / "p.csv")
    assert code == 2 and err.startswith("data:")


# --- config and flags ----------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    (tmp_path / "run.cfg").write_text("# comment\nmax_epochs = 3\nseed = 4  # trailing\nthreshold = 0.6\n")
    args = cli.build_parser().parse_args(["train", "--config", str(tmp_path / "run.cfg"), "--seed", "9",
                                          "--set", "batch_size=8"])
    cfg = cli.resolve_config(args)
    assert cfg["max_epochs"] == 3 and cfg["seed"] == 9 and cfg["batch_size"] == 8 and cfg["threshold"] == 0.6


def test_config_unknown_key(tmp_path):
    (tmp_path / "run.cfg").write_text("max_epochs = 3\nlearnin_rate = 1\n")
    code, _, err = run("metrics", "x.csv", "--config", tmp_path / "run.cfg")
    assert code == 2 and err.startswith("config:") and "line 2" in err


def test_unknown_flag_and_missing_command():
    assert run("train", "--frobnicate")[0] == 2
    assert run()[0] == 2


@pytest.mark.parametrize("command", ["train", "evaluate", "diagnose", "metrics", "synth"])
def test_help_lists_every_flag(command, capsys):
    assert cli.main([command, "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--threshold", "--out", "--manifest", "--ontology", "--checkpoint", "--set"):
        assert flag in text
