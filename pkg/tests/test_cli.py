import csv
import json
import re
from pathlib import Path

import pytest

from ddnet.cli import PAPER_TAUS, main
from ddnet.config import RunConfig
from ddnet.data import DatasetManifest

SMALL = ["--override", "synth.n_train=12", "--override", "synth.n_val=4", "--override", "synth.T=32",
         "--override", "model.T_max=32", "--override", "train.epochs=2", "--override", "train.batch_size=4"]


def run(argv, out: Path):
    code = main(list(argv) + ["--out", str(out)])
    dirs = sorted(out.iterdir()) if out.exists() else []
    return code, (dirs[-1] if dirs else None)


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- synth ------------------------------------------------------------------

def test_synth_twice_gives_identical_trees(tmp_path):
    args = ["synth", "--seed", "7", "--videos", "8"]
    c1, a = run(args, tmp_path / "a")
    c2, b = run(args, tmp_path / "b")
    assert c1 == c2 == 0
    assert re.fullmatch(r"\d{8}-\d{6}-s7", a.name)
    assert tree(a / "data") == tree(b / "data")
    assert (a / "config.json").read_text() == (b / "config.json").read_text()


def test_synth_zero_videos_warns(tmp_path, capsys):
    code, d = run(["synth", "--videos", "0"], tmp_path)
    assert code == 0
    assert "0 videos" in capsys.readouterr().out
    for split in ("train", "val"):
        assert DatasetManifest.load(d / "data" / f"{split}.json").entries == []


def test_synth_default_config_counts(tmp_path):
    code, d = run(["synth"], tmp_path)
    assert code == 0
    m = DatasetManifest.load(d / "data" / "train.json")
    assert m.K == 4 and len(m.entries) == 400
    assert {e.domain_id for e in m.entries} == {0, 1, 2, 3}
    # 30% of videos have no segment under the default count distribution
    forged = sum(e.video_label for e in m.entries) / len(m.entries)
    assert 0.62 <= forged <= 0.78
    assert len(DatasetManifest.load(d / "data" / "val.json").entries) == 100


# -- exit codes -------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["train", "--override", "model.nope=1"],
    ["train", "--override", "train.epochs=abc"],
    ["train", "--override", "model.n_heads=5"],
    ["train", "--override", "model.tau=1.5"],
    ["train", "--bogus-flag"],
    ["sweep-tau", "--tau-list", "0.3", "1.0"],
    ["eval"],
    ["synth", "--videos", "-1"],
])
def test_validation_errors_exit_1(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path)]) == 1


def test_validation_happens_before_any_output(tmp_path):
    main(["train", "--override", "model.nope=1", "--out", str(tmp_path / "x")])
    assert not (tmp_path / "x").exists()


def test_bad_thread_cap_exit_1(tmp_path, monkeypatch):
    monkeypatch.setenv("DDNET_THREADS", "0")
    assert main(["sweep-tau", "--out", str(tmp_path)]) == 1


def test_io_errors_exit_3(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ddck"), "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.ddck"
    bad.write_bytes(b"DDCK\x01\x00garbage")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 3
    assert main(["train", "--override", f"data_dir={tmp_path / 'nodata'}", "--out", str(tmp_path)]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failures_exit_2(tmp_path):
    assert run(["train", *SMALL, "--override", "train.lr=1e300", "--override", "train.clip_norm=null"],
               tmp_path / "a")[0] == 2
    # a zero tolerance cannot pass
    assert run(["gradcheck", *SMALL, "--sample", "2", "--tol", "0"], tmp_path / "b")[0] == 2


# -- train / eval -----------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code, d = run(["train", *SMALL, "--seed", "3"], out)
    assert code == 0
    return d


def test_train_run_directory_contents(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"config.json", "train.log", "metrics.csv", "metrics.png", "checkpoint.ddck", "report.json",
            "predictions.csv", "pr_curves.png"} <= names
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["train"]["seed"] == 3 and cfg["synth"]["T"] == 32
    assert "epoch   2/2" in (trained / "train.log").read_text()
    assert len(list(csv.reader(open(trained / "metrics.csv")))) == 3


def test_echoed_config_reproduces_run(trained, tmp_path):
    code, d = run(["train", "--config", str(trained / "config.json")], tmp_path)
    assert code == 0
    assert (d / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (d / "checkpoint.ddck").read_bytes() == (trained / "checkpoint.ddck").read_bytes()


def test_eval_reproduces_training_report(trained, tmp_path, capsys):
    code, d = run(["eval", "--config", str(trained / "config.json"), "--checkpoint",
                   str(trained / "checkpoint.ddck")], tmp_path)
    assert code == 0
    assert json.loads((d / "report.json").read_text()) == json.loads((trained / "report.json").read_text())
    assert "AP@0.5" in capsys.readouterr().out
    assert (d / "predictions.csv").read_bytes() == (trained / "predictions.csv").read_bytes()


def test_resume_from_checkpoint_matches_uninterrupted(trained, tmp_path):
    three = ["--override", "train.epochs=3"]
    _, full = run(["train", *SMALL, "--seed", "3", *three], tmp_path / "full")
    code, res = run(["train", *SMALL, "--seed", "3", *three, "--checkpoint", str(trained / "checkpoint.ddck")],
                    tmp_path / "res")
    assert code == 0
    last = lambda d: list(csv.reader(open(d / "metrics.csv")))[-1]  # noqa: E731
    assert last(res) == last(full)
    assert (res / "checkpoint.ddck").read_bytes() == (full / "checkpoint.ddck").read_bytes()


def test_resume_rejects_different_model(trained, tmp_path):
    assert run(["train", *SMALL, "--override", "model.tau=0.2", "--checkpoint",
                str(trained / "checkpoint.ddck")], tmp_path)[0] == 1


def test_training_from_data_dir_matches_in_memory(trained, tmp_path):
    _, s = run(["synth", *SMALL], tmp_path / "s")
    code, d = run(["train", *SMALL, "--seed", "3", "--override", f"data_dir={s / 'data'}"], tmp_path / "t")
    assert code == 0
    assert (d / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()


def test_data_dir_dimension_mismatch_exit_1(tmp_path):
    _, s = run(["synth", *SMALL], tmp_path / "s")
    assert run(["train", *SMALL, "--override", f"data_dir={s / 'data'}", "--override", "model.D_sem=7"],
               tmp_path / "t")[0] == 1


# -- gradcheck --------------------------------------------------------------

def test_gradcheck_table(tmp_path, capsys):
    code, d = run(["gradcheck", *SMALL, "--sample", "2"], tmp_path)
    assert code == 0
    table = (d / "gradcheck.txt").read_text()
    for group in ("clfe", "transformer", "graph", "heads", "tda"):
        assert re.search(rf"^{group}\s+\d+\s+\S+\s+\S+\s+PASS$", table, re.M), group
    assert "PASS" in capsys.readouterr().out


# -- sweep-tau --------------------------------------------------------------

def _sweep_rows(d: Path):
    return list(csv.DictReader(open(d / "tau_sweep.csv")))


def test_sweep_single_tau_equals_train(tmp_path):
    code, d = run(["sweep-tau", *SMALL, "--tau-list", "0.5"], tmp_path / "s")
    assert code == 0
    _, t = run(["train", *SMALL, "--override", "model.tau=0.5"], tmp_path / "t")
    rows = _sweep_rows(d)
    rep = json.loads((t / "report.json").read_text())
    assert len(rows) == 1 and float(rows[0]["AP95"]) == rep["ap"]["0.95"] and float(rows[0]["mAP"]) == rep["mAP"]
    assert (d / "tau_sweep.png").exists() and (d / "tau_0.5" / "config.json").exists()


def test_sweep_parallel_equals_serial(tmp_path, monkeypatch):
    args = ["sweep-tau", *SMALL, "--override", "train.epochs=1", "--tau-list", "0.1,0.9"]
    monkeypatch.setenv("DDNET_THREADS", "1")
    _, a = run(args, tmp_path / "a")
    monkeypatch.setenv("DDNET_THREADS", "2")
    code, b = run(args, tmp_path / "b")
    assert code == 0
    assert (a / "tau_sweep.csv").read_bytes() == (b / "tau_sweep.csv").read_bytes()


def test_sweep_default_tau_list_is_paper_set(tmp_path):
    from ddnet.cli import build_parser, parse_taus
    args = build_parser().parse_args(["sweep-tau"])
    assert parse_taus(args.tau_list) == list(PAPER_TAUS)


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.apply_override("model.kernel_sizes=[1,5]")
    path = tmp_path / "c.json"
    path.write_text(cfg.echo())
    assert RunConfig.load(path).to_dict() == cfg.to_dict()
