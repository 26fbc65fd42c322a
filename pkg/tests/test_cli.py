import json

import pytest
import yaml

from onetrans import cli, config
from onetrans.model import ConfigError

SMALL = ["--set", "data.synthetic.n_requests=12", "--set", "data.synthetic.candidates_per_request=3",
         "--set", "data.synthetic.n_users=6"]


def run(*argv):
    return cli.main(list(argv))


def test_verify_exit_zero(tmp_path):
    out = tmp_path / "v.json"
    assert run("verify", "--seeds", "2", "--out", str(out)) == 0
    rep = json.loads(out.read_text())
    assert rep["failed"] == 0 and rep["cases"] == 8 and rep["worst_max_abs_diff"] <= 1e-5


def test_verify_failure_exit_two(tmp_path):
    assert run("verify", "--seeds", "1", "--tolerance", "-1", "--out", str(tmp_path / "v.json")) == 2


def test_malformed_key_names_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"learning_rate": 0.1}}))
    assert run("datagen", "--config", str(cfg), "--seed", "0", "--out", str(tmp_path / "d.jsonl")) == 1
    assert "learning_rate" in capsys.readouterr().err
    assert run("train", "--seed", "0", "--data", "synthetic", "--out", str(tmp_path / "m.npz"),
               "--set", "model.n_layerz=3") == 1
    assert "n_layerz" in capsys.readouterr().err


def test_unknown_command_and_missing_args(capsys):
    assert run("fly") == 1
    assert run() == 1
    assert run("datagen", "--out", "x.jsonl") == 1          # --seed is required
    assert "--seed" in capsys.readouterr().err


def test_datagen_train_eval(tmp_path):
    data = tmp_path / "d.jsonl"
    assert run("datagen", "--seed", "1", "--out", str(data), *SMALL) == 0
    assert len(data.read_text().splitlines()) == 12
    ckpt = tmp_path / "run" / "m.npz"
    assert run("train", "--seed", "1", "--data", str(data), "--out", str(ckpt), *SMALL) == 0
    assert (tmp_path / "run" / "m_metrics.csv").read_text().startswith("day,task,auc,uauc")
    assert (tmp_path / "run" / "m_daily.png").stat().st_size > 0
    eff = yaml.safe_load((tmp_path / "run" / "config.effective.yaml").read_text())
    assert eff["seed"] == 1 and eff["data"]["synthetic"]["n_requests"] == 12
    assert run("eval", "--ckpt", str(ckpt), "--data", str(data)) == 0
    assert (tmp_path / "run" / "m_eval.csv").exists()
    assert run("eval", "--ckpt", str(tmp_path / "nope.npz"), "--data", str(data)) == 1


def test_bench_ablation_writes_csv(tmp_path):
    out = tmp_path / "abl" / "ablation.csv"
    assert run("bench", "ablation", "--seed", "0", "--budget-steps", "2", "--out", str(out),
               "--set", "bench.ablation.axes=[pyramid]", *SMALL) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("variant,axis,value,auc") and len(lines) == 3
    assert out.with_suffix(".png").exists()
    assert (out.parent / "config.effective.yaml").exists()


def test_bench_scaling_and_perf(tmp_path):
    out = tmp_path / "s.csv"
    assert run("bench", "scaling", "--seed", "0", "--axis", "depth", "--grid", "1,2", "--out", str(out),
               "--set", "train.max_batches=2", *SMALL) == 0
    assert len(out.read_text().splitlines()) == 3
    out = tmp_path / "p.csv"
    assert run("bench", "perf", "--seed", "0", "--toggles", "cache", "--candidates", "4", "--requests", "2",
               "--reps", "1", "--out", str(out)) == 0
    assert len(out.read_text().splitlines()) == 3
    assert run("bench", "perf", "--seed", "0", "--toggles", "warp", "--out", str(out)) == 1


def test_config_overrides_and_strict_keys(tmp_path):
    rc = config.load(None, ["seed=3", "model.n_layers=1", "train.batch_size=8"])
    assert rc.seed == 3 and rc.model_config().n_layers == 1 and rc.train_config().batch_size == 8
    with pytest.raises(ConfigError, match="bogus"):
        config.load(None, ["bogus=1"])
    with pytest.raises(ConfigError, match="preset"):
        config.load(None, ["model.preset=huge"])
    with pytest.raises(ConfigError):
        config.load(None, ["no_equals_sign"])
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"model": {"d_model": 16}}))
    rc = config.load(f, ["model.n_heads=4"])
    assert rc.model_config().d_model == 16 and rc.model_config().n_heads == 4
