import csv
import hashlib
import json

import pytest

from chagasnet.cli import RunConfig, main, read_config, UsageError


def _digest(root):
    h = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return h


def test_synth_is_reproducible(tmp_path):
    args = ["--seed", "7", "--n-ecgs", "12", "--n-patients", "4", "--set", "duration_s=2"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
    da, db = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert da == db and len(da) == 12 + 3


def _write_worked_case(tmp_path):
    preds, labels = tmp_path / "p.csv", tmp_path / "l.csv"
    with open(preds, "w", newline="") as fp, open(labels, "w", newline="") as fl:
        pw, lw = csv.writer(fp), csv.writer(fl)
        pw.writerow(["record_id", "probability", "prediction"])
        lw.writerow(["record_id", "patient_id", "label", "source"])
        for i in range(20):
            prob = 0.9 if i == 0 else 0.5 - i / 100
            pw.writerow([f"r{i}", prob, int(prob >= 0.5)])
            lw.writerow([f"r{i}", f"p{i}", 1.0 if i in (0, 13) else 0.0, "self_reported"])
    return preds, labels


def test_evaluate_worked_case(tmp_path, capsys):
    preds, labels = _write_worked_case(tmp_path)
    assert main(["evaluate", "--preds", str(preds), "--labels", str(labels), "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out
    assert "challenge_score 0.5\n" in out
    assert json.loads((tmp_path / "rep.json").read_text())["n_positive"] == 2


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert main([]) == 1


def test_runtime_error_is_single_line(tmp_path, capsys):
    code = main(["pretrain", "--data", str(tmp_path / "nothing"), "--run", str(tmp_path / "run")])
    err = capsys.readouterr().err
    assert code == 2
    assert err.startswith("error: ") and err.count("\n") == 1


def test_config_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "x.cfg"
    cfg.write_text("n_bins = 10\nlearning_rate = 3\n")
    with pytest.raises(UsageError):
        read_config(cfg)
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 1


def test_precedence_flags_over_file(tmp_path):
    from chagasnet.cli import build_parser, resolve_config
    cfg = tmp_path / "x.cfg"
    cfg.write_text("seed = 3\nn_bins = 20  # comment\n")
    args = build_parser().parse_args(["pretrain", "--config", str(cfg), "--seed", "9"])
    rc = resolve_config(args)
    assert (rc.seed, rc.n_bins, rc.patience) == (9, 20, RunConfig.patience)


def test_shipped_desk_config_parses():
    from pathlib import Path
    values = read_config(Path(__file__).parent.parent / "configs" / "desk.cfg")
    RunConfig(**values)


@pytest.mark.slow
def test_end_to_end_small(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(
        "n_patients = 12\nn_ecgs = 40\nn_biomarkers = 3\nduration_s = 3\n"
        "stem_channels = 8\nn_filters = 8\nbottleneck = 8\nn_blocks = 1\n"
        "n_bins = 5\npretrain_batch_size = 8\nfinetune_batch_size = 8\n"
        "pretrain_max_epochs = 1\nfinetune_max_epochs = 1\nn_segments = 3\n"
    )
    data, run = tmp_path / "data", tmp_path / "run"
    common = ["--config", str(cfg), "--seed", "1"]
    assert main(["synth", "--out", str(data), *common]) == 0
    assert main(["pretrain", "--data", str(data), "--run", str(run), *common]) == 0
    assert (run / "pretrain" / "checkpoint.pt").exists()
    assert main(["finetune", "--data", str(data), "--run", str(run), *common]) == 0
    assert len(list((run / "finetune").glob("fold_*.pt"))) == 5
    preds = tmp_path / "preds.csv"
    assert main(["predict", "--data", str(data), "--run", str(run), "--out", str(preds), *common]) == 0
    assert main(["evaluate", "--preds", str(preds), "--labels", str(data), "--data", str(data),
                 "--checkpoint", str(run / "pretrain" / "checkpoint.pt"), *common]) == 0
    assert "perplexity[" in capsys.readouterr().out
    assert main(["plot-dist", "--checkpoint", str(run / "pretrain" / "checkpoint.pt"), "--data", str(data),
                 "--out", str(tmp_path / "plots"), "--biomarkers", "Albumin;Calcium, Total", *common]) == 0
    assert (tmp_path / "plots" / "Calcium__Total.svg").exists()
    assert main(["finetune", "--data", str(data), "--run", str(tmp_path / "cold"), *common]) == 2
