import csv
import io
import json

import numpy as np
import pytest

from omniisr import cli
from omniisr.config import RunConfig, default_text, parse_config, parse_text
from omniisr.diffcore import ConfigurationError, ParamSet
from omniisr.fedsim import RoundDiagnostics
from omniisr.hybrid import AlignmentRecord
from omniisr.theory import BOUND_HEADER, SWEEP_HEADER

SMALL = """
[data]
n = 80
dims = 4
num_classes = 3

[network]
widths = [6, 6, 6]

[optimizer]
eta = 0.05
iterations = 5
batch_size = 16
"""

FED = """
[fed]
num_clients = 3
rounds = 2
"""


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, cmd, text, out="out", *extra):
    cfg = write(tmp_path, text)
    code = cli.main([cmd, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def header(path):
    return next(csv.reader(io.StringIO(path.read_text())))


def test_minimal_config_defaults():
    cfg = parse_text("[data]\n", "cl")
    assert cfg["taps"]["count"] == 2 and cfg["taps"]["alpha"] == 0.4 and cfg["taps"]["lam"] == 0.1
    assert cfg["fed"]["concentration"] == 0.3
    assert cfg["taps"]["placement"] == "input"


def test_hybrid_needs_fed():
    with pytest.raises(ConfigurationError, match="fed"):
        parse_text("[data]\n[hybrid]\nregime = 'fixed'\n", "hybrid")


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigurationError, match=r"data\.nn.*line 3"):
        parse_text("[data]\nn = 10\nnn = 3\n", "cl")


def test_bad_value_names_key():
    with pytest.raises(ConfigurationError, match="fed.partition"):
        parse_text("[data]\n[fed]\npartition = 'random'\n", "fl")
    with pytest.raises(ConfigurationError, match="malformed"):
        parse_text("[data\n", "cl")


def test_round_trip(tmp_path):
    cfg = parse_text(SMALL + FED + "[hybrid]\nregime = 'adaptive'\nalpha = 0.3\n", "hybrid")
    again = parse_text(cfg.to_toml(), "hybrid")
    assert again == cfg
    full = parse_text(default_text("hybrid"), "hybrid")
    assert parse_text(full.to_toml(), "hybrid") == full


def test_config_hash_depends_only_on_text(tmp_path):
    a = parse_config(write(tmp_path, SMALL, "a.toml"), "cl")
    b = parse_config(write(tmp_path, SMALL, "b.toml"), "cl")
    assert a.hash == b.hash and len(a.hash) == 64
    assert parse_text(SMALL + "\n", "cl").hash != a.hash


def test_seed_priority():
    cfg = parse_text("seed = 5\n[data]\n", "cl")
    bare = parse_text("[data]\n", "cl")
    env = {"OMNIISR_SEED": "9"}
    assert cli.resolve_seed(3, cfg, env) == (3, "flag")
    assert cli.resolve_seed(None, cfg, env) == (5, "config")
    assert cli.resolve_seed(None, bare, env) == (9, "env")
    assert cli.resolve_seed(None, bare, {}) == (0, "default")
    with pytest.raises(ConfigurationError):
        cli.resolve_seed(None, bare, {"OMNIISR_SEED": "x"})


def test_params_round_trip(tmp_path):
    p = ParamSet({"a": np.arange(4.0).reshape(2, 2), "b": np.ones(3)}, {"a": ("model", None), "b": ("adapter", 1)})
    cli.save_params(p, tmp_path / "p.npz")
    q = cli.load_params(tmp_path / "p.npz")
    assert q.max_abs_diff(p) == 0.0 and q.tag("b") == ("adapter", 1)


def test_train_cl_outputs(tmp_path):
    code, out = run(tmp_path, "train-cl", SMALL)
    assert code == 0
    assert header(out / "trace.csv")[:2] == ["iter", "ce"]
    assert header(out / "metrics.csv") == ["metric", "value"]
    m = json.loads((out / "manifest.json").read_text())
    assert m["exit_status"] == 0 and m["command"] == "train-cl"
    assert m["config_hash"] == parse_text(SMALL, "cl").hash
    assert {"trace.csv", "metrics.csv", "params.npz", "config.toml"} <= {f["path"] for f in m["files"]}
    assert {"started", "finished", "versions", "seed"} <= set(m)


def test_train_cl_deterministic(tmp_path):
    _, a = run(tmp_path, "train-cl", SMALL, "a")
    _, b = run(tmp_path, "train-cl", SMALL, "b")
    for name in ("trace.csv", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    _, c = run(tmp_path, "train-cl", SMALL, "c", "--seed", "1")
    assert (a / "trace.csv").read_bytes() != (c / "trace.csv").read_bytes()


def test_train_fl_and_hybrid(tmp_path):
    code, out = run(tmp_path, "train-fl", SMALL + FED, "fl")
    assert code == 0 and header(out / "diagnostics.csv") == RoundDiagnostics.HEADER
    code, out = run(tmp_path, "train-hybrid", SMALL + FED + "[hybrid]\nregime = 'adaptive'\n", "hy")
    assert code == 0 and header(out / "alignment.csv") == AlignmentRecord.HEADER


def test_bounds_and_escape(tmp_path):
    code, out = run(tmp_path, "bounds", "[theory]\neta = 0.01\neps = [0.5]\n", "b")
    assert code == 0
    rows = list(csv.reader(io.StringIO((out / "bounds.csv").read_text())))
    assert rows[0] == BOUND_HEADER and [r[0] for r in rows[1:]] == ["cl", "fl", "hybrid"]
    assert header(out / "complexity.csv") == cli.COMPLEXITY_HEADER
    code, out = run(tmp_path, "escape-sweep", "", "e")
    assert code == 0 and header(out / "escape_sweep.csv") == SWEEP_HEADER


def test_saddle_and_grad_check(tmp_path):
    code, out = run(tmp_path, "saddle-sim", "[saddle]\ntrials = 100\ny0 = 0.5\n", "s")
    assert code == 0 and (out / "saddle.csv").exists()
    code, out = run(tmp_path, "grad-check", SMALL, "g")
    assert code == 0 and (out / "gradcheck.csv").exists()


def test_exit_codes(tmp_path):
    code, out = run(tmp_path, "train-cl", "[data]\nbogus = 1\n", "x")
    assert code == 1
    code, _ = run(tmp_path, "train-hybrid", SMALL, "y")
    assert code == 1
    # the probability floor keeps the loss finite until the weights themselves overflow
    diverge = SMALL.replace("eta = 0.05", "eta = 1e200")
    code, out = run(tmp_path, "train-cl", diverge, "z")
    assert code == 2
    assert json.loads((out / "manifest.json").read_text())["exit_status"] == 2


def test_parse_values():
    assert cli.parse_values("1..5", "count") == [1, 2, 3, 4, 5]
    assert cli.parse_values("1,2,4", "spacing") == [1, 2, 4]
    assert cli.parse_values("input,output", "placement") == ["input", "output"]


def test_ablate_skips_infeasible_spacing(tmp_path):
    text = SMALL.replace("widths = [6, 6, 6]", "widths = [4, 4, 4, 4, 4, 4, 4, 4, 4]").replace(
        "iterations = 5", "iterations = 2") + "[taps]\ncount = 3\n[ablate]\nseeds = [0]\n"
    code, out = run(tmp_path, "ablate", text, "ab", "--axis", "spacing", "--values", "3,4")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "summary.csv").read_text())))
    assert [r["status"] for r in rows] == ["ok", "skipped"]
    assert rows[0]["taps"] == "1 4 7"
    assert (out / "runs" / "spacing-3" / "seed-0" / "metrics.csv").exists()


def test_ablate_placement_pairs_seeds(tmp_path):
    text = SMALL.replace("iterations = 5", "iterations = 2") + "[ablate]\nseeds = [0, 1]\n"
    code, out = run(tmp_path, "ablate", text, "pl", "--axis", "placement", "--values", "input,output")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "summary.csv").read_text())))
    assert [r["seeds"] for r in rows] == ["0 1", "0 1"]
    assert header(out / "summary.csv") == cli.ABLATE_HEADER


def test_default_text_parses():
    for mode in ("cl", "fl", "hybrid", "bounds"):
        assert isinstance(parse_text(default_text(mode), mode), RunConfig)
