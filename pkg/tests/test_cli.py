import re
import shlex
import sys

import pytest

from hvlad.cli import main
from hvlad.data import read_manifest
from hvlad.traineval import TRAIN_LOG, EvalReport, list_checkpoints, read_model_config

IDENTITY = f"{shlex.quote(sys.executable)} -m hvlad.converters identity {{source}} {{targets}} {{out}}"
TINY = ["--trunk-channels", "4,4,4,4", "--embed-dim", "8", "--crop-s", "0.3", "--batch-size", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "corpus"), "--speakers", "3", "--utts", "4"]) == 0
    assert main(["pair", "--corpus", str(root / "corpus"), "--out", str(root / "m.jsonl"),
                 "--n-per-speaker", "4", "--n-train", "9", "--n-test", "3"]) == 0
    assert main(["convert", "--manifest", str(root / "m.jsonl"), "--converter", IDENTITY,
                 "--converter-id", "identity", "--out-dir", str(root / "conv")]) == 0
    return root


def train_run(ws, name, *extra):
    argv = ["train", "--manifest", str(ws / "m.jsonl"), "--run-dir", str(ws / name), *TINY, *extra]
    assert main(argv) == 0
    return ws / name


def eval_run(ws, run, out="reports"):
    assert main(["eval", str(run), "--manifest", str(ws / "m.jsonl"), "--crop-s", "0.3",
                 "--out-dir", str(ws / out)]) == 0


def test_pipeline_products(workspace):
    m = read_manifest(workspace / "m.jsonl")
    assert len(m.records) == 12 and m.converter_id == "identity"
    assert all(r.converted_path for r in m.records)


def test_pair_missing_root(tmp_path, capsys):
    code = main(["pair", "--corpus", str(tmp_path / "absent"), "--out", str(tmp_path / "m.jsonl")])
    assert code == 3
    out, err = capsys.readouterr()
    assert out == "" and "does not exist" in err


def test_pair_reruns_byte_identical(workspace, tmp_path):
    for name in ("a.jsonl", "b.jsonl"):
        assert main(["pair", "--corpus", str(workspace / "corpus"), "--out", str(tmp_path / name),
                     "--n-per-speaker", "4", "--seed", "5"]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_unknown_variant_is_usage_error(workspace, capsys):
    code = main(["train", "--manifest", str(workspace / "m.jsonl"), "--run-dir", "x", "--variant", "resnet"])
    assert code == 2
    assert "invalid choice" in capsys.readouterr().err


def test_steps_zero_writes_initial_checkpoint_only(workspace):
    run = train_run(workspace, "zero", "--steps", "0", "--clusters", "64")
    assert [p.name for p in list_checkpoints(run)] == ["step_000000.hvckpt"]
    header = (run / TRAIN_LOG).read_text()
    assert "variant=hvlad clusters=64 n_classes=3 n_targets=1" in header


def test_nonfinite_exit_code(workspace):
    argv = ["train", "--manifest", str(workspace / "m.jsonl"), "--run-dir", str(workspace / "nan"),
            *TINY, "--variant", "baseline1", "--steps", "2", "--lr", "1e300"]
    with pytest.warns(RuntimeWarning):
        assert main(argv) == 4


def test_three_seeds_give_one_row(workspace, capsys):
    for seed in range(3):
        run = train_run(workspace, f"seed{seed}", "--variant", "baseline2", "--clusters", "3",
                        "--steps", "2", "--eval-every", "1", "--seed", str(seed))
        eval_run(workspace, run, out="seeds")
    capsys.readouterr()
    assert main(["report", str(workspace / "seeds"), "--out-dir", str(workspace / "seed_report")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t") == ["variant", "clusters", "n_targets", "runs", "top1", "top5", "step"]
    assert len(lines) == 2
    row = lines[1].split("\t")
    assert row[:4] == ["baseline2", "3", "1", "3"]
    assert re.fullmatch(r"\d+\.\d\d ± \d+\.\d\d", row[4])
    assert (workspace / "seed_report" / "table.tsv").read_text() == "\n".join(lines) + "\n"


def test_cluster_sweep_plot(workspace):
    for K in (32, 64, 128):
        run = train_run(workspace, f"k{K}", "--clusters", str(K), "--steps", "1")
        eval_run(workspace, run, out="sweep")
    assert main(["report", str(workspace / "sweep"), "--out-dir", str(workspace / "sweep_report")]) == 0
    svg = (workspace / "sweep_report" / "curves.svg").read_text()
    assert svg.lstrip().startswith("<?xml")
    labels = set(re.findall(r"hvlad K=\d+ targets=1", svg))
    assert labels == {"hvlad K=32 targets=1", "hvlad K=64 targets=1", "hvlad K=128 targets=1"}


def test_mixed_variants_need_group(workspace):
    a = train_run(workspace, "mix_a", "--variant", "baseline1", "--steps", "1")
    b = train_run(workspace, "mix_b", "--variant", "hvlad", "--clusters", "3", "--steps", "1")
    eval_run(workspace, a, out="mixed")
    eval_run(workspace, b, out="mixed")
    out = str(workspace / "mixed_report")
    assert main(["report", str(workspace / "mixed"), "--out-dir", out]) == 5
    assert main(["report", str(workspace / "mixed"), "--out-dir", out, "--group"]) == 0


def test_eval_mismatched_checkpoint(workspace, tmp_path):
    run = train_run(workspace, "mm", "--variant", "baseline1", "--steps", "0")
    (run / "model.cfg").write_text("variant=hvlad\nK=3\nn_classes=3\n")
    assert main(["eval", str(run), "--manifest", str(workspace / "m.jsonl"), "--crop-s", "0.3"]) == 5


def test_eval_writes_report(workspace, capsys):
    run = train_run(workspace, "ev", "--variant", "baseline3", "--steps", "2", "--eval-every", "1")
    capsys.readouterr()
    eval_run(workspace, run, out="ev_reports")
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("checkpoint\t") and len(out) == 2
    rep = EvalReport.from_json((workspace / "ev_reports" / "ev_step_000002_test.json").read_text())
    assert rep.variant == "baseline3" and rep.n_items == 3 and [s[0] for s in rep.series] == [0, 1, 2]


def test_config_file_with_flag_override(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# defaults\nmanifest={workspace / 'm.jsonl'}\nvariant=baseline1\nsteps=3\n"
                   "trunk-channels=4,4,4,4\nembed_dim=8\ncrop_s=0.3\nbatch_size=2\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--run-dir", str(run), "--steps", "1"]) == 0
    assert read_model_config(run).variant == "baseline1"
    assert [p.name for p in list_checkpoints(run)] == ["step_000000.hvckpt", "step_000001.hvckpt"]
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour=blue\n")
    assert main(["train", "--config", str(bad), "--manifest", "m", "--run-dir", "r"]) == 2
