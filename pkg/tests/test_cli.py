import json

import pytest

from morphoformer import cli

from helpers import TINY_RUN, run_pipeline


SUBCOMMANDS = ["generate", "split", "prior", "train", "ablate", "eval", "gate-stats", "leakage-audit"]


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help_lists_defaults(name, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([name, "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[name]
    for action in sub._actions:
        if action.dest == "help":
            continue
        flag = action.option_strings[-1]
        assert flag in text
    # every documented flag states its default exactly once
    body = text.split("options:")[1]
    entries = [e for e in body.split("\n  -") if e.strip() and not e.strip().startswith("h, --help")]
    for entry in entries:
        assert entry.count("default:") == 1, entry


def test_unknown_config_key_names_the_field(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochz": 3}}))
    assert cli.main(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "train.epochz" in capsys.readouterr().err
    p.write_text(json.dumps({"colour": 1}))
    assert cli.main(["generate", "--config", str(p)]) == 1
    p.write_text(json.dumps({"model": {"depth": 3}}))
    assert cli.main(["generate", "--config", str(p)]) == 1
    assert "depth" in capsys.readouterr().err


def test_malformed_config(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["split", "--config", str(p)]) == 1
    assert cli.main(["split", "--config", str(tmp_path / "missing.json")]) == 1
    assert "not found" in capsys.readouterr().err


def test_missing_inputs_exit_one(tmp_path, capsys):
    assert cli.main(["split", "--data", str(tmp_path)]) == 1
    assert "run `generate` first" in capsys.readouterr().err


def test_runtime_failure_exits_two(tmp_path, monkeypatch):
    def boom(cfg, args):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(cli, "cmd_split", boom)
    assert cli.main(["split", "--data", str(tmp_path)]) == 2


def test_flags_override_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "train": {"epochs": 7}}))
    args = cli.build_parser().parse_args(["train", "--config", str(p), "--epochs", "2", "--seed", "5"])
    cfg = cli.apply_overrides(cli.load_run_config(args.config), args)
    assert cfg.train.epochs == 2 and cfg.seed == 5


def test_generate_is_deterministic(tmp_path):
    out = {}
    for k in range(2):
        d = tmp_path / str(k)
        assert cli.main(["generate", "--cities", "2", "--grid-size", "30", "--seed", "7", "--out", str(d)]) == 0
        out[k] = {p.relative_to(d).as_posix(): p.read_bytes() for p in d.rglob("*")
                  if p.is_file() and p.name != "config.resolved.json"}
    assert out[0] == out[1]
    assert sorted(out[0]) == ["cells/city00.csv", "cells/city01.csv", "generate.json",
                              "rasters/city00.mras", "rasters/city01.mras"]


def test_generate_parallel_matches_serial(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["generate", "--cities", "2", "--grid-size", "30", "--out", str(a)]) == 0
    assert cli.main(["generate", "--cities", "2", "--grid-size", "30", "--out", str(b), "--jobs", "2"]) == 0
    for p in ("cells/city01.csv", "rasters/city01.mras"):
        assert (a / p).read_bytes() == (b / p).read_bytes()


def test_pipeline_outputs_and_resolved_configs(tmp_path):
    files = run_pipeline(tmp_path)
    for name in ("run/config.resolved.json", "run/split.csv", "run/split.json", "run/prior_all.json",
                 "run/prior_all_hexbin.csv", "run/train/model.ckpt", "run/train/train_log.jsonl",
                 "run/train/config.resolved.json", "run/eval/eval.json", "run/eval/eval.txt",
                 "run/eval/gate.json", "run/leakage.json"):
        assert name in files, name
    resolved = json.loads(files["run/train/config.resolved.json"])
    assert resolved["train"]["epochs"] == TINY_RUN["train"]["epochs"]
    assert resolved["loss"]["beta_h"] == 2.0
    prior = json.loads(files["run/prior_all.json"])
    assert {"pearson", "spearman", "variance_explained", "rmse_ceiling_m"} <= set(prior)
    hexbin = files["run/prior_all_hexbin.csv"].decode().splitlines()
    assert hexbin[0] == "lambda_lo,lambda_hi,h_lo,h_hi,count"


def test_ablate_writes_table(tmp_path):
    files = run_pipeline(tmp_path, steps=["generate", "ablate"])
    text = files["run/ablation/ablation.txt"].decode()
    assert "w/o BGTD" in text and "w/o MCL" in text and "BH RMSE" in text
    report = json.loads(files["run/ablation/ablation.json"])
    assert len(report["ablation"]["runs"]) == 9


def test_ablate_rejects_two_seeds(tmp_path):
    run_pipeline(tmp_path, steps=["generate"])
    assert cli.main(["ablate", "--data", str(tmp_path / "run"), "--seeds", "2"]) == 1


def test_gate_stats_requires_gate(tmp_path):
    cfg = dict(TINY_RUN, model={"d0": 24, "d": 12, "ablate_bgtd": True})
    run_pipeline(tmp_path, cfg, steps=["generate", "train"])
    assert cli.main(["gate-stats", "--data", str(tmp_path / "run")]) == 1
