import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from callikit.cli import main
from callikit.ingest import open_dataset
from callikit.orderformer import OrderModel, OrderModelConfig, save_order_model

SUBCOMMANDS = [
    ["gen"], ["train-order"], ["train-align"], ["order"], ["eval"], ["eval-order"],
    ["decode-align"], ["pilot"], ["pilot", "noise"], ["pilot", "slicing"], ["stats"],
]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def report(out):
    return json.loads(out.splitlines()[0])


def tree_bytes(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    assert main(["gen", "--out", str(out), "--count", "12", "--seed", "3"]) == 0
    return out


@pytest.mark.parametrize("argv", SUBCOMMANDS, ids=lambda a: " ".join(a))
def test_help(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv + ["--help"])
    assert exc.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "callikit.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "pilot" in r.stdout


@pytest.mark.parametrize(
    "argv,code",
    [
        (["frob"], 2),
        (["gen", "--bogus"], 2),
        ([], 2),
        (["stats", "--data", "/no/such/dir"], 3),
        (["eval", "--data", "/no/such/dir"], 2),  # missing --pred
        (["pilot", "slicing", "--threads", "0"], 2),
    ],
)
def test_exit_codes(argv, code, capsys):
    got, out, err = run(argv, capsys)
    assert got == code
    line = err.strip().splitlines()[-1]
    assert json.loads(line)["code"] == code


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("gen:\n  colums: [1, 3]\n")
    code, _, err = run(["gen", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "colums" in err


def test_capacity_exit(tmp_path, capsys):
    shapes = [{"label": "字", "points": [[10 + 14 * k, 10], [20 + 14 * k, 20]], "column": k, "row": 0} for k in range(51)]
    page = tmp_path / "wide.json"
    page.write_text(json.dumps({"imageWidth": 800, "imageHeight": 40, "shapes": shapes}))
    ck = tmp_path / "m"
    save_order_model(OrderModel(OrderModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=16)), ck)
    code, _, err = run(["order", page, "--checkpoint", ck], capsys)
    assert code == 4 and json.loads(err.strip())["error"] == "capacity"


def test_gen_rerun_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen", "--out", a, "--count", "8", "--seed", "11"], capsys)[0] == 0
    assert run(["gen", "--config", a / "run.json", "--out", b], capsys)[0] == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_seed_precedence(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 5\ngen:\n  count: 2\n")
    monkeypatch.setenv("CALLI_SEED", "9")
    run(["gen", "--config", cfg, "--out", tmp_path / "env"], capsys)
    run(["gen", "--config", cfg, "--out", tmp_path / "flag", "--seed", "4"], capsys)
    monkeypatch.delenv("CALLI_SEED")
    run(["gen", "--config", cfg, "--out", tmp_path / "cfg"], capsys)
    seeds = [json.loads((tmp_path / d / "run.json").read_text())["seed"] for d in ("env", "flag", "cfg")]
    assert seeds == [9, 4, 5]


def test_train_order_rerun_identical(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train-order:\n  epochs: 1\n  model: {d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32}\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train-order", "--config", cfg, "--data", dataset, "--out", a], capsys)[0] == 0
    assert run(["train-order", "--config", a / "run.json", "--out", b], capsys)[0] == 0
    assert tree_bytes(a) == tree_bytes(b)
    code, out, _ = run(["eval-order", "--data", dataset, "--checkpoint", a], capsys)
    assert code == 0 and report(out)["pages"] == 12


def test_train_align_rerun_identical(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(
        "train-align:\n  steps: 3\n  batch: 4\n  eval_samples: 10\n"
        "  setup: {vocab: 30, dim: 16, tokens: 4, feat_dim: 8}\n"
        "  model: {n_heads: 2, n_blocks: 1, d_ff: 16}\n"
    )
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train-align", "--config", cfg, "--out", a], capsys)[0] == 0
    assert run(["train-align", "--config", a / "run.json", "--out", b], capsys)[0] == 0
    assert tree_bytes(a) == tree_bytes(b)
    code, out, _ = run(["decode-align", "--checkpoint", a, "--count", "5"], capsys)
    assert code == 0 and report(out)["count"] == 5


def test_eval_exact_predictions(dataset, tmp_path, capsys):
    pages = open_dataset(dataset).pages()
    pred = tmp_path / "p.jsonl"
    pred.write_text("".join(json.dumps({"id": p.sample_id, "prediction": p.text}, ensure_ascii=False) + "\n" for p in pages))
    code, out, _ = run(["eval", "--pred", pred, "--data", dataset], capsys)
    r = report(out)
    assert code == 0 and r["macro_f1"] == 1.0 and r["ned"] == 0.0 and r["count"] == 12


def test_eval_bad_predictions(dataset, tmp_path, capsys):
    pred = tmp_path / "p.jsonl"
    pred.write_text('{"id": 3}\n')
    assert run(["eval", "--pred", pred, "--data", dataset], capsys)[0] == 3


def test_order_single_column_labelme(tmp_path, capsys):
    shapes = [{"label": c, "points": [[50, 10 + 30 * k], [70, 30 + 30 * k]]} for k, c in enumerate("天地玄黃")]
    shapes = [shapes[2], shapes[0], shapes[3], shapes[1]]
    page = tmp_path / "col.json"
    page.write_text(json.dumps({"imageWidth": 120, "imageHeight": 160, "shapes": shapes}, ensure_ascii=False))
    code, out, _ = run(["order", page], capsys)
    assert code == 0 and report(out)["text"] == "天地玄黃"


def test_pilot_noise_cells(tmp_path, capsys):
    code, out, _ = run(["pilot", "noise", "--steps", "3", "--sentences", "10", "--out", tmp_path / "pn"], capsys)
    assert code == 0
    rows = (tmp_path / "pn" / "noise_grid.csv").read_text().strip().split("\n")
    assert len(rows) == 4 and all(len(r.split(",")) == 4 for r in rows)
    assert report(out)["origin"] == 1.0
    run(["pilot", "noise", "--config", tmp_path / "pn" / "run.json", "--out", tmp_path / "pn2"], capsys)
    assert tree_bytes(tmp_path / "pn") == tree_bytes(tmp_path / "pn2")


def test_pilot_slicing_and_stats(dataset, capsys):
    code, out, _ = run(["pilot", "slicing", "--chars", "10"], capsys)
    assert code == 0 and report(out)["cross"]["mean_fragments"] == 4.0
    code, out, _ = run(["stats", "--data", dataset], capsys)
    assert code == 0 and report(out)["pages"] == 12


def test_example_config_is_valid(tmp_path, capsys):
    example = Path(__file__).resolve().parents[1] / "configs" / "example.yaml"
    code, _, err = run(["gen", "--config", example, "--out", tmp_path / "g", "--count", "3"], capsys)
    assert code == 0, err


def test_yaml_exponent_numbers(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("pilot-noise:\n  sentences: 3\n  mu_steps: 2\n  sigma_steps: 2\n  sigma_range: [0, 2]\n")
    assert run(["pilot", "noise", "--config", cfg], capsys)[0] == 0
    cfg.write_text("train-align:\n  lr0: 1e-3\n  steps: 1\n  batch: 2\n  eval_samples: 2\n"
                   "  setup: {vocab: 10, dim: 8, tokens: 2, feat_dim: 4}\n  model: {n_heads: 2, n_blocks: 1, d_ff: 8}\n")
    assert run(["train-align", "--config", cfg, "--out", tmp_path / "a"], capsys)[0] == 0
    cfg.write_text("train-align:\n  lr0: fast\n")
    assert run(["train-align", "--config", cfg, "--out", tmp_path / "b"], capsys)[0] == 2
