import json
import subprocess
import sys
import zlib

import numpy as np
import pytest

from coca_lab.cli import build_parser, load_run_config, main, substream, validate_run_config
from coca_lab.errors import ConfigError

TRAIN_CFG = {
    "seed": 3,
    "model": {"preset": "tiny", "max_seq": 32},
    "train": {"total_steps": 4, "batch_size": 2, "seq_len": 32, "lr_peak": 1e-3, "warmup_fraction": 0.25},
    "corpus": {"kind": "mix", "size_tokens": 4000},
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TRAIN_CFG))
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


def test_substreams_are_named_and_stable():
    assert substream(0, "model") == substream(0, "model")
    assert substream(0, "model") != substream(0, "data")
    assert substream(0, "model") != substream(1, "model")
    want = int(np.random.SeedSequence([5, zlib.crc32(b"eval")]).generate_state(1)[0])
    assert substream(5, "eval") == want


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        validate_run_config({"model": {}})
    with pytest.raises(ConfigError, match="bogus"):
        validate_run_config({"seed": 1, "bogus": {}})
    with pytest.raises(ConfigError, match="model.depth"):
        validate_run_config({"seed": 1, "model": {"depth": 3}})
    with pytest.raises(ConfigError):
        validate_run_config({"seed": -1})
    with pytest.raises(ConfigError):
        validate_run_config({"seed": True})
    p = tmp_path / "bad.json"
    p.write_text('{"seed": 1,\n  "model": }')
    with pytest.raises(ConfigError, match=r"bad.json:2:\d+"):
        load_run_config(p)
    assert validate_run_config({"seed": 0, "eval": {"stride": 8}})["seed"] == 0


def test_train_outputs(trained):
    run = trained / "run"
    assert {"final.ckpt", "metrics.csv", "manifest.json", "run_config.json"} <= {p.name for p in run.iterdir()}
    man = json.loads((run / "manifest.json").read_text())
    assert len(man["config_hash"]) == 64 and man["seed"] == 3 and "versions" in man
    assert man["steps"] == 4


def test_train_is_reproducible(trained, tmp_path):
    cfg = trained / "cfg.json"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for name in ("final.ckpt", "metrics.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (trained / "run" / name).read_bytes()


def test_refuses_existing_output(trained, capsys):
    cfg = trained / "cfg.json"
    assert main(["train", "--config", str(cfg), "--out", str(trained / "run")]) == 2
    assert "--force" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"seed": 1, "train": {"lr": 3}}')
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "train.lr" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["eval", "ppl"])
    assert e.value.code == 2


def test_runtime_error_exit_code(tmp_path):
    assert main(["inspect", "checkpoint", str(tmp_path / "missing.ckpt")]) == 1


def test_inspect(trained, capsys):
    assert main(["inspect", "checkpoint", str(trained / "run" / "final.ckpt")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["step"] == 4 and info["has_optimizer_state"]


def test_eval_ppl_and_passkey(trained, capsys):
    ck = str(trained / "run" / "final.ckpt")
    out = trained / "ppl"
    assert main(["eval", "ppl", "--checkpoint", ck, "--out", str(out), "--contexts", "32,64", "--docs", "1"]) == 0
    lines = (out / "ppl.csv").read_text().splitlines()
    assert lines[0] == "context,ppl" and len(lines) == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["stride"] == 256 and man["ntk_kappa"] == 1.0
    out = trained / "pk"
    assert main(["eval", "passkey", "--checkpoint", ck, "--out", str(out), "--n", "2", "--template", "desk"]) == 0
    rows = (out / "passkey.csv").read_text().splitlines()
    assert rows[0] == "length,n,accuracy"
    assert [r.split(",")[0] for r in rows[1:]] == ["64", "128", "256", "512"]
    assert json.loads((out / "manifest.json").read_text())["ntk_kappa"] == 16.0


def test_diagnose_verbs(tmp_path, capsys):
    assert main(["diagnose", "decay", "--coca", "--head-dim", "32", "--s-max", "300", "--out", str(tmp_path / "d")]) == 0
    assert "violations: 0" in capsys.readouterr().out
    assert (tmp_path / "d" / "decay.csv").read_text().startswith("s,a,rhs_weak,rhs_strong")
    assert main(["diagnose", "order", "--head-dim", "16", "--s-max", "100", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "order.csv").read_text().startswith("j,theta0,predicted,measured")
    assert main(["diagnose", "borders", "--theta0", "0.5", "--head-dim", "8", "--out", str(tmp_path / "b")]) == 0
    assert "agree: True" in capsys.readouterr().out


def test_diagnose_from_checkpoint(trained, capsys):
    ck = str(trained / "run" / "final.ckpt")
    assert main(["diagnose", "order", "--checkpoint", ck, "--s-max", "40", "--out", str(trained / "oc")]) == 0
    assert "variant: coca" in capsys.readouterr().out


def test_bench_verb(tmp_path, capsys):
    args = ["bench", "contraction", "--sq", "8", "--sk", "8", "--heads", "1", "--d", "8", "--reps", "1"]
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "bench.csv").read_text().startswith("method,seconds,peak_elems,max_rel_err")
    assert "fused-python" in capsys.readouterr().out


def test_parser_defaults():
    p = build_parser()
    a = p.parse_args(["eval", "passkey", "--checkpoint", "x"])
    assert a.n is None and a.ntk_kappa is None  # resolved to 100 and the covering kappa at run time
    a = p.parse_args(["bench", "contraction"])
    assert (a.sq, a.sk, a.heads, a.d) == (128, 128, 4, 64)


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "coca_lab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "diagnose" in r.stdout
