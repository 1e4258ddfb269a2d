import os
import re
from pathlib import Path

import numpy as np
import pytest

from r2gconv.checkpoint import load_checkpoint, load_dump
from r2gconv.cli import COMMANDS, build_parser, main
from r2gconv.data import write_idx_images, write_idx_labels
from r2gconv.models import r2gconv_formula

SNAPSHOTS = Path(__file__).parent / "snapshots"
UPDATE = os.environ.get("R2G_UPDATE_SNAPSHOTS") == "1"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def records(out, prefix):
    """Parse ``prefix key=value ...`` lines; an empty prefix selects bare ``name=...`` rows."""
    rows = []
    for line in out.splitlines():
        if prefix and line.startswith(prefix + " "):
            rows.append(dict(kv.split("=", 1) for kv in line.split()[1:]))
        elif not prefix and line.startswith("name="):
            rows.append(dict(kv.split("=", 1) for kv in line.split()))
    return rows


@pytest.fixture(scope="module")
def idx(tmp_path_factory):
    d = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(0)
    write_idx_images(d / "tri", rng.integers(0, 256, (32, 28, 28), dtype=np.uint8))
    write_idx_labels(d / "trl", rng.integers(0, 10, 32))
    write_idx_images(d / "tei", rng.integers(0, 256, (16, 28, 28), dtype=np.uint8))
    write_idx_labels(d / "tel", rng.integers(0, 10, 16))
    return ["--train-images", str(d / "tri"), "--train-labels", str(d / "trl"),
            "--test-images", str(d / "tei"), "--test-labels", str(d / "tel")]


# ---------------------------------------------------------------- help

@pytest.mark.parametrize("cmd", sorted(COMMANDS))
def test_help_snapshot(capsys, cmd):
    code, out, _ = run(capsys, cmd, "--help")
    assert code == 0
    path = SNAPSHOTS / f"{cmd}.txt"
    if UPDATE or not path.exists():
        path.write_text(out)
    assert out == path.read_text()


@pytest.mark.parametrize("cmd", sorted(COMMANDS))
def test_help_lists_every_flag_with_default(capsys, cmd):
    _, out, _ = run(capsys, cmd, "--help")
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        if not action.option_strings or action.dest == "help":
            continue
        assert action.option_strings[-1] in out
        if action.default is not None and not isinstance(action.default, bool):
            assert "default:" in out
    for flag in ("--seed", "--sigma", "--mode", "--precision"):
        assert flag in out


def test_top_level_help(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    assert all(cmd in out for cmd in COMMANDS)


# ---------------------------------------------------------------- exit codes

@pytest.mark.parametrize("argv", [["train", "--bogus"], ["nosuch"], [], ["param-count", "--widths", "1,2"],
                                  ["train", "--mode", "loose"], ["sigma-sweep", "--sigmas", "a,b"]])
def test_usage_errors_exit_two(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert "usage:" in err


def test_runtime_failure_exits_one_with_structured_line(capsys, tmp_path):
    code, out, err = run(capsys, "eval", "--ckpt", str(tmp_path / "missing"), "--test-images", "x",
                         "--test-labels", "y")
    assert code == 1
    assert out.startswith("config ")
    assert re.fullmatch(r"error kind=\S+ message=.*\n", err)


def test_bad_checkpoint_kind_is_reported(capsys, tmp_path, idx):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    code, _, err = run(capsys, "eval", "--ckpt", str(bad), *idx[4:])
    assert code == 1 and "kind=bad_magic" in err


def test_missing_data_paths(capsys, monkeypatch):
    monkeypatch.delenv("R2G_DATA_DIR", raising=False)
    code, _, err = run(capsys, "train", "--epochs", "1")
    assert code == 1 and "--train-images" in err


# ---------------------------------------------------------------- config echo

def test_config_echo_includes_defaults(capsys):
    _, out, _ = run(capsys, "build-filters")
    first = out.splitlines()[0]
    assert first.startswith("config ")
    cfg = dict(kv.split("=", 1) for kv in first.split()[1:])
    assert cfg["seed"] == "0" and cfg["sigma"] == "0.1" and cfg["flavor"] == "depthwise"
    assert cfg["precision"] == "f32" and cfg["dump"] == "none"


def test_data_dir_env_fills_paths(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("R2G_DATA_DIR", str(tmp_path))
    _, out, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "none"))
    cfg = dict(kv.split("=", 1) for kv in out.splitlines()[0].split()[1:])
    assert cfg["test_images"] == str(tmp_path / "t10k-images-idx3-ubyte")


# ---------------------------------------------------------------- train / eval / equiv-check

@pytest.fixture(scope="module")
def strict_ckpt(tmp_path_factory, idx):
    out = tmp_path_factory.mktemp("ck") / "m.ckpt"
    code = main(["train", "--mode", "strict", "--sigma", "0", "--seed", "7", "--epochs", "1", *idx,
                 "--out", str(out), "--widths", "4,8,8,8", "--batch-size", "16"])
    assert code == 0
    return out


def test_train_happy_path(capsys, idx, tmp_path):
    out = tmp_path / "m.ckpt"
    code, text, _ = run(capsys, "train", "--mode", "strict", "--sigma", "0", "--seed", "7", "--epochs", "2", *idx,
                        "--out", str(out), "--widths", "4,8,8,8", "--batch-size", "16")
    assert code == 0
    recs = [ln for ln in text.splitlines() if ln.startswith("epoch=")]
    assert [ln.split()[:2] for ln in recs] == [["epoch=1", "split=train"], ["epoch=1", "split=test"],
                                                ["epoch=2", "split=train"], ["epoch=2", "split=test"]]
    assert out.exists()
    _, meta = load_checkpoint(out)
    assert meta["seed"] == 7


def test_train_is_deterministic(capsys, idx):
    argv = ["train", "--seed", "3", "--epochs", "1", *idx, "--widths", "4,4,4,4", "--batch-size", "16"]
    strip = lambda s: [ln.rsplit(" wall", 1)[0] for ln in s.splitlines()]  # noqa: E731
    _, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv)
    assert strip(a) == strip(b)


def test_eval_matches_training_record(capsys, strict_ckpt, idx):
    code, out, _ = run(capsys, "eval", "--ckpt", str(strict_ckpt), *idx[4:])
    assert code == 0
    rec = [ln for ln in out.splitlines() if ln.startswith("epoch=")]
    assert len(rec) == 1 and "split=test" in rec[0]


def test_equiv_check_strict_checkpoint(capsys, strict_ckpt):
    code, out, _ = run(capsys, "equiv-check", "--ckpt", str(strict_ckpt), "--probes", "16", "--seed", "7")
    assert code == 0
    summary = records(out, "summary")
    assert len(summary) == 1 and float(summary[0]["ee"]) <= 1e-4
    per_g = records(out, "record")
    assert sorted(int(r["g"]) for r in per_g) == [0, 1, 2, 3]
    assert all(set(r) >= {"name", "g", "error", "norm"} for r in per_g)
    assert [r["holds"] for r in records(out, "bound")] == ["true", "true"]


# ---------------------------------------------------------------- param-count

def test_param_count_formula_rows(capsys):
    code, out, _ = run(capsys, "param-count", "--model", "r2net-toy", "--widths", "8,16,32,32")
    assert code == 0
    rows = [r for r in records(out, "") if r.get("kind") == "gcba"]
    assert rows
    for r in rows:
        ci, co, k = int(r["ci"]), int(r["co"]), int(r["k"])
        assert int(r["params"]) == 4 * ci * co + k * k * co + 16 + 2 * co == r2gconv_formula(ci, co, k) + 2 * co
    total = out.splitlines()[-1]
    assert re.fullmatch(r"name=total params=\d+", total)


def test_param_count_reference_widths(capsys):
    _, out, _ = run(capsys, "param-count", "--widths", "16,32,64,128", "--in-channels", "3", "--lifting-k", "3")
    rows = {r["name"]: r for r in records(out, "")}
    assert rows["stem"]["params"] == "480"
    assert rows["stage1.down"]["params"] == "2416"
    assert all(r.get("formula_ok", "true") == "true" for r in rows.values())


# ---------------------------------------------------------------- build-filters / gradcheck

def test_build_filters_dump(capsys, tmp_path):
    path = tmp_path / "bank.bin"
    code, out, _ = run(capsys, "build-filters", "--flavor", "depthwise", "--k", "3", "--ci", "1", "--co", "2",
                       "--dump", str(path), "--mode", "strict", "--precision", "f64-check")
    assert code == 0
    dump = load_dump(path)
    assert list(dump) == ["k_init", "delta", "k_rel"]
    bank = dump["k_rel"].reshape(2, 4, 3, 3)
    base = dump["k_init"].reshape(2, 3, 3)
    for i in range(4):
        np.testing.assert_allclose(bank[:, i], np.rot90(base, i, axes=(1, 2)), atol=1e-6)
    assert "strictness_gap=0.000000e+00" in out


def test_build_filters_pointwise_forces_unit_kernel(capsys):
    _, out, _ = run(capsys, "build-filters", "--flavor", "pointwise", "--k", "5", "--ci", "3", "--co", "2")
    assert "k_init_shape=2x3x4x1x1" in out


def test_gradcheck_single_op(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "conv2d", "--trials", "2", "--precision", "f64-check")
    assert code == 0
    assert out.splitlines()[-1] == "summary failed=0"


def test_gradcheck_unknown_op_is_runtime_error(capsys):
    code, _, err = run(capsys, "gradcheck", "--op", "nope")
    assert code == 1 and err.startswith("error kind=")
