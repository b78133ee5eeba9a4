import csv
import json
from pathlib import Path

import pytest

from eratlab.harness import ConfigError, load_config, parse_config, render_report, run, sweep
from eratlab.harness.cli import main
from eratlab.harness.config import BENCHMARKS, dump_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

QUICK = """\
method = erat
dataset.kind = blobs
dataset.train_per_class = 30
dataset.test_per_class = 30
noise.kind = symm
noise.rate = 0.4
train.warmup_epochs = 1
train.total_epochs = 3
"""


def quick(tmp_path, extra="", name="run"):
    path = tmp_path / f"{name}.cfg"
    path.write_text(QUICK + extra + f"output.dir = {tmp_path / name}\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- config


def test_benchmark_presets_apply_and_file_entries_win():
    cfg = parse_config("dataset.kind = blobs\n")
    assert cfg.defense_l2 == float(BENCHMARKS["blobs"]["defense.l2"])
    cfg = parse_config("dataset.kind = blobs\ntrain.lambda_scale = 7\n")
    assert cfg.train.lambda_scale == 7


@pytest.mark.parametrize(
    "text,line,fragment",
    [
        ("method = erat\nbogus.key = 1\n", 2, "unknown key"),
        ("method = erat\n\nthis line has no equals\n", 3, "expected 'key = value'"),
        ("seed = 1\nseed = 2\n", 2, "already set on line 1"),
        ("method = erat\nnoise.rate = lots\n", 2, "bad value for noise.rate"),
        ("method = magic\n", 1, "method"),
    ],
)
def test_config_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "exp.cfg")
    assert info.value.line == line
    assert f"exp.cfg:{line}:" in str(info.value) and fragment in str(info.value)


def test_semantic_errors_without_a_line():
    with pytest.raises(ConfigError, match="rate"):
        parse_config("noise.kind = symm\nnoise.rate = 1.5\n")
    with pytest.raises(ConfigError, match="defense.linf"):
        parse_config("method = at_linf\ndefense.linf = none\n")


def test_overrides_replace_file_values():
    cfg = parse_config("seed = 1\n", overrides=["seed=5", "train.eta=0.5"])
    assert cfg.seed == 5 and cfg.train.eta == 0.5
    with pytest.raises(ConfigError, match="--set"):
        parse_config("", overrides=["nope=1"])


def test_dump_round_trips():
    cfg = parse_config(QUICK)
    again = parse_config(dump_config(cfg))
    assert again.echo() == cfg.echo()


def test_baseline_registry_has_one_budget():
    for method, norm in (("at_linf", "linf"), ("at_l2", "l2")):
        tcfg = parse_config(f"method = {method}\n").train_config()
        assert [b.norm for b in tcfg.defense_budgets] == [norm] and not tcfg.selection
    assert len(parse_config("method = erat\n").train_config().defense_budgets) == 2


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.cfg")):
        load_config(path)


def test_missing_and_non_utf8_config(tmp_path):
    with pytest.raises(ConfigError, match="nothere.cfg"):
        load_config(tmp_path / "nothere.cfg")
    (tmp_path / "bin.cfg").write_bytes(b"seed = \xff\n")
    with pytest.raises(ConfigError, match="UTF-8"):
        load_config(tmp_path / "bin.cfg")


# ---------------------------------------------------------------- runs


def test_train_writes_artifacts(tmp_path):
    assert main(["train", str(quick(tmp_path))]) == 0
    out = tmp_path / "run"
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:8] == ["epoch", "L_l", "L_u", "L_s", "lambda", "test_acc", "selection_precision", "selection_recall"]
    assert rows[0][8:] == [f"labeled_{k}" for k in range(4)] and len(rows) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert 0 <= summary["final_accuracy"] <= 100 and summary["config"]["method"] == "erat"
    assert (out / "model.ckpt").exists() and (out / "config.txt").exists()


def test_ce_on_clean_blobs_exceeds_ninety():
    cfg = parse_config("method = ce\ndataset.kind = blobs\ntrain.total_epochs = 20\ntrain.warmup_epochs = 2\n")
    assert run(cfg, write=False).final_accuracy > 90


def test_run_is_reproducible(tmp_path):
    main(["train", str(quick(tmp_path, name="a"))])
    main(["train", str(quick(tmp_path, name="b"))])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_corruption_touches_only_training_split():
    cfg = parse_config(QUICK + "poison.family = up\n")
    result = run(cfg, write=False)
    assert result.corruption["poison"]["within_budget"] and result.corruption["poison"]["labels_unchanged"]
    assert abs(result.corruption["labels"]["flip_fraction"] - 0.4) < 0.1


@pytest.mark.parametrize("flag", ["selection", "rebalance", "uniform", "strong_aug", "adversarial"])
def test_ablation_flag_changes_only_its_mechanism(flag):
    base = run(parse_config(QUICK), write=False)
    off = run(parse_config(QUICK, overrides=[f"ablation.{flag}=false"]), write=False)
    # warmup epochs share everything except the mechanism; the default run itself is unchanged
    assert base.reports[0].phase == off.reports[0].phase == "warmup"
    again = run(parse_config(QUICK), write=False)
    assert [vars(r) for r in again.reports] == [vars(r) for r in base.reports]
    assert [vars(r) for r in off.reports] != [vars(r) for r in base.reports]
    if flag in ("selection", "rebalance"):
        # selection happens after warmup, so warmup must match bit for bit
        assert vars(off.reports[0]) == vars(base.reports[0])
    if flag == "strong_aug":
        # the attack-draw stream is independent of the augmentation streams
        assert [r.draw_counts for r in off.reports] == [r.draw_counts for r in base.reports]


def test_score_fn_ablation_keeps_warmup_identical():
    base = run(parse_config(QUICK), write=False)
    off = run(parse_config(QUICK, overrides=["ablation.score_fn=ce"]), write=False)
    assert vars(off.reports[0]) == vars(base.reports[0])
    assert off.reports[1].selection != base.reports[1].selection


def test_sweep_over_eta_emits_four_results(tmp_path):
    text = QUICK.replace("train.total_epochs = 3", "train.total_epochs = 2")
    summaries = sweep(text, {"train.eta": ["0", "0.1", "0.5", "1"]}, base_dir=tmp_path)
    assert len(summaries) == 4
    assert len(json.loads((tmp_path / "sweep.json").read_text())) == 4
    assert len(list(tmp_path.glob("run_*/summary.json"))) == 4
    report = render_report(tmp_path)
    assert report.count("erat") == 4


def test_report_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError, match="absent"):
        render_report(tmp_path / "absent")


# ---------------------------------------------------------------- cli


def test_gen_twice_gives_identical_files(tmp_path, capsys):
    cfg = quick(tmp_path)
    assert main(["gen", str(cfg)]) == 0
    first = (tmp_path / "run" / "train.txt").read_bytes()
    assert main(["gen", str(cfg)]) == 0
    assert (tmp_path / "run" / "train.txt").read_bytes() == first
    assert "wrote" in capsys.readouterr().out


def test_corrupt_from_input_file(tmp_path):
    cfg = quick(tmp_path, "poison.family = urp\n")
    main(["gen", str(cfg)])
    assert main(["corrupt", str(cfg), "--input", str(tmp_path / "run" / "train.txt")]) == 0
    audit = json.loads((tmp_path / "run" / "audit.json").read_text())
    assert audit["poison"]["within_budget"]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 1\nwhat\n")
    assert main(["train", str(bad)]) == 1
    assert "bad.cfg:2:" in capsys.readouterr().err

    missing = tmp_path / "missing.cfg"
    missing.write_text("dataset.kind = file\ndataset.train_path = /no/such/train.txt\ndataset.test_path = /no/such/test.txt\n")
    assert main(["train", str(missing)]) == 2
    assert "/no/such/train.txt" in capsys.readouterr().err

    diverge = quick(tmp_path, name="diverge")
    assert main(["train", str(diverge), "--set", "method=ce", "--set", "train.lr=1e300"]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_cli_set_and_sweep(tmp_path, capsys):
    cfg = quick(tmp_path)
    assert main(["train", str(cfg), "--set", "method=ce"]) == 0
    assert json.loads((tmp_path / "run" / "summary.json").read_text())["method"] == "ce"
    assert main(["sweep", str(cfg), "--grid", "method=ce,at_linf", "--set", "train.total_epochs=2"]) == 0
    assert "method=at_linf" in capsys.readouterr().out
    assert main(["sweep", str(cfg)]) == 1
    assert main(["report", str(tmp_path / "run")]) == 0
