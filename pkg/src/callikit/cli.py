"""``callikit`` command line.

Every command prints a compact JSON line followed by a human table on
stdout. Failures print one JSON object on stderr and exit with

    2  usage or configuration error
    3  unreadable or invalid input
    4  capacity exceeded (more than 50 columns)
    5  internal error
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from callikit import __version__

log = logging.getLogger("callikit")

RUN_FORMAT = "callikit.run/v1"
EXIT_USAGE, EXIT_INPUT, EXIT_CAPACITY, EXIT_INTERNAL = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _usage(msg: str) -> CliError:
    return CliError(EXIT_USAGE, "usage", msg)


def _input(msg: str) -> CliError:
    return CliError(EXIT_INPUT, "input", msg)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through the JSON error path
        raise _usage(f"{self.prog}: {message}")


# ----------------------------------------------------------------- config


def load_config(path: Optional[str]) -> dict:
    """YAML config file, or a previous ``run.json`` (its resolved config is reused)."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise _input(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        # run.json goes through json: YAML 1.1 reads "1e-06" as a string
        doc = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except json.JSONDecodeError as exc:
        raise _usage(f"cannot parse config {p}: {exc}") from None
    except yaml.YAMLError as exc:
        raise _usage(f"cannot parse config {p}: {exc}".replace("\n", " ")) from None
    doc = doc or {}
    if not isinstance(doc, dict):
        raise _usage(f"config {p} must be a mapping")
    if doc.get("format") == RUN_FORMAT:
        return doc["config"]
    return doc


def resolve_seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("CALLI_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise _usage(f"CALLI_SEED must be an integer, got {env!r}") from None
    return int(config.get("seed", 0))


def _section(config: dict, name: str) -> dict:
    sec = config.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise _usage(f"config section {name!r} must be a mapping")
    return dict(sec)


def _merge(defaults: dict, section: dict, flags: dict, where: str) -> dict:
    unknown = set(section) - set(defaults)
    if unknown:
        raise _usage(f"unknown settings in {where}: {sorted(unknown)}")
    out = dict(defaults)
    out.update({k: _coerce(defaults[k], v, f"{where}.{k}") for k, v in section.items()})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _coerce(default: Any, value: Any, where: str) -> Any:
    # numbers written like 1e-6 arrive from YAML as strings
    if isinstance(default, bool) or value is None:
        return value
    if isinstance(default, (int, float)) and isinstance(value, str):
        try:
            num = float(value)
        except ValueError:
            raise _usage(f"{where} must be a number, got {value!r}") from None
        return int(num) if isinstance(default, int) and num.is_integer() else num
    return value


def _defaults(cls, drop=("seed",)) -> dict:
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in drop}


def _build(cls, **kw):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise _usage(f"invalid {cls.__name__} settings: {exc}") from None


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input_hash(path: Path) -> str:
    if path.is_dir():
        for name in ("manifest.json",):
            if (path / name).exists():
                return _sha256_file(path / name)
        raise _input(f"{path} has no manifest.json")
    return _sha256_file(path)


def write_run(out_dir: Path, command: str, seed: int, section: dict, inputs: dict[str, Path]) -> None:
    """``run.json``: command, resolved settings, seed and input content hashes."""
    doc = {
        "format": RUN_FORMAT,
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": {"seed": seed, command: _jsonable(section)},
        "inputs": {k: {"path": str(v), "sha256": _input_hash(v)} for k, v in sorted(inputs.items())},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def emit(report: dict, table: str, out: Optional[Path] = None, name: str = "report.json") -> None:
    blob = json.dumps(_jsonable(report), sort_keys=True, ensure_ascii=False)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(blob + "\n", encoding="utf-8")
    print(blob)
    print(table)


def _path(value: Optional[str], what: str, must_exist: bool = True) -> Path:
    if value is None:
        raise _usage(f"missing {what}")
    p = Path(value)
    if must_exist and not p.exists():
        raise _input(f"{what} not found: {p}")
    return p


def _load_dataset_pages(data: Path, split: Optional[str]):
    from callikit.ingest import load_labelme_dir, open_dataset

    if (data / "manifest.json").exists():
        pages = open_dataset(data).pages(split)
    elif data.is_dir():
        pages = load_labelme_dir(data)
    else:
        raise _input(f"{data} is not a dataset directory")
    if not pages:
        raise _input(f"no pages in {data}" + (f" for split {split!r}" if split else ""))
    return pages


# --------------------------------------------------------------- commands


def cmd_gen(args, config: dict, seed: int) -> int:
    from callikit.synthgen import GenConfig, gen_dataset

    sec = _merge(_defaults(GenConfig), _section(config, "gen"), {"count": args.count}, "gen")
    out = _path(args.out, "--out", must_exist=False)
    cfg = _build(GenConfig, seed=seed, **sec)
    manifest = gen_dataset(cfg, out)
    write_run(out, "gen", seed, {k: v for k, v in cfg.to_dict().items() if k != "seed"}, {})
    counts: dict[str, int] = {}
    for e in manifest["files"]:
        counts[e["split"]] = counts.get(e["split"], 0) + 1
    emit({"out": str(out), "pages": len(manifest["files"]), "splits": counts}, f"wrote {len(manifest['files'])} pages to {out}")
    return 0


def cmd_train_order(args, config: dict, seed: int) -> int:
    from callikit.orderformer import OrderModelConfig, OrderTrainConfig, order_sample, save_order_model, train_order

    raw = _section(config, "train-order")
    model_sec = raw.pop("model", {}) or {}
    defaults = _defaults(OrderTrainConfig) | {"data": None, "split": "train"}
    flags = {"data": args.data, "split": args.split, "epochs": args.epochs, "batch": args.batch, "lr0": args.lr0}
    sec = _merge(defaults, raw, flags, "train-order")
    msec = _merge(_defaults(OrderModelConfig), model_sec, {}, "train-order.model")
    data = _path(sec.pop("data"), "--data")
    split = sec.pop("split")
    out = _path(args.out, "--out", must_exist=False)
    pages = _load_dataset_pages(data, split)
    samples = [order_sample(p) for p in pages]
    tcfg = _build(OrderTrainConfig, seed=seed, **sec)
    mcfg = _build(OrderModelConfig, seed=seed, **msec)
    res = train_order(samples, tcfg, mcfg, on_epoch=lambda e, l: log.info("epoch %d loss %.5f", e, l))
    digest = save_order_model(res.model, out, {"final_loss": res.final_loss, "epoch_losses": res.epoch_losses, "pages": len(samples)})
    write_run(out, "train-order", seed, {"data": str(data), "split": split, **sec, "model": msec}, {"data": data})
    emit(
        {"checkpoint": str(out), "digest": digest, "final_loss": res.final_loss, "epochs": tcfg.epochs, "pages": len(samples)},
        f"trained {tcfg.epochs} epochs on {len(samples)} pages, final loss {res.final_loss:.5f}",
    )
    return 0


_ALIGN_SETUP = {"vocab": 500, "dim": 128, "n_chars": None, "tokens": 64, "feat_dim": 64, "rank": 8, "noise": 0.5}
_ALIGN_MODEL = {"n_heads": 8, "n_blocks": 4, "d_ff": 512, "feature_pe": False}


def _align_setup(s: dict, seed: int):
    from callikit.callialign import AlignSetup, FeatureBankConfig

    n_chars = s["n_chars"] or s["vocab"]
    bank = FeatureBankConfig(n_chars=n_chars, tokens=s["tokens"], dim=s["feat_dim"], rank=s["rank"], noise=s["noise"], seed=seed)
    return AlignSetup.build(s["vocab"], s["dim"], n_chars, bank, seed)


def cmd_train_align(args, config: dict, seed: int) -> int:
    from callikit.callialign import AlignModelConfig, AlignTrainConfig, save_align, train_align

    raw = _section(config, "train-align")
    ssec = _merge(_ALIGN_SETUP, raw.pop("setup", {}) or {}, {"vocab": args.vocab}, "train-align.setup")
    msec = _merge(_ALIGN_MODEL, raw.pop("model", {}) or {}, {}, "train-align.model")
    sec = _merge(_defaults(AlignTrainConfig), raw, {"steps": args.steps, "loss": args.loss, "batch": args.batch}, "train-align")
    out = _path(args.out, "--out", must_exist=False)
    try:
        setup = _align_setup(ssec, seed)
    except (TypeError, ValueError) as exc:
        raise _usage(f"invalid train-align setup: {exc}") from None
    cfg = _build(AlignTrainConfig, seed=seed, **sec)
    mcfg = _build(AlignModelConfig, feat_dim=ssec["feat_dim"], tokens=ssec["tokens"], d_model=ssec["dim"], seed=seed, **msec)
    res = train_align(setup, cfg, mcfg)
    digest = save_align(out, res.model, setup, {"accuracy": res.accuracy, "final_loss": res.losses[-1]})
    (out / "curve.json").write_text(json.dumps({"loss": res.losses, "accuracy": res.accuracy}) + "\n", encoding="utf-8")
    write_run(out, "train-align", seed, {**sec, "setup": ssec, "model": msec}, {})
    emit(
        {"checkpoint": str(out), "digest": digest, "final_loss": res.losses[-1], "heldout_accuracy": res.final_accuracy},
        f"trained {cfg.steps} steps, held-out character accuracy {res.final_accuracy:.4f}",
    )
    return 0


def _box_rows(page, order):
    return [
        {"index": i, "label": page.boxes[i].label, "box": page.boxes[i].box.as_list()}
        for i in order
    ]


def cmd_order(args, config: dict, seed: int) -> int:
    from callikit.ingest import load_page
    from callikit.orderformer import load_order_model, predict_reading_order, rule_baseline

    page = load_page(_path(args.page, "page"))
    if not page.boxes:
        raise _input("page has no boxes")
    if args.checkpoint:
        model, _ = load_order_model(_path(args.checkpoint, "--checkpoint"))
        pred = predict_reading_order(page, model)
        source = "model"
    else:
        pred = rule_baseline(page)
        source = "rule"
    rows = _box_rows(page, pred.order)
    table = "\n".join(f"{k:>4}  {r['label']}  " + " ".join(f"{v:8.1f}" for v in r["box"]) for k, r in enumerate(rows))
    emit(
        {"id": page.sample_id, "source": source, "order": pred.order, "text": "".join(r["label"] for r in rows), "boxes": rows},
        table,
        Path(args.out) if args.out else None,
        "order.json",
    )
    return 0


def cmd_eval(args, config: dict, seed: int) -> int:
    from callikit.ingest import read_predictions
    from callikit.metrics import aggregate, score_sample

    sec = _merge({"pred": None, "data": None, "split": None, "tier": None}, _section(config, "eval"),
                 {"pred": args.pred, "data": args.data, "split": args.split, "tier": args.tier}, "eval")
    preds, dup = read_predictions(_path(sec["pred"], "--pred"))
    pages = _load_dataset_pages(_path(sec["data"], "--data"), sec["split"])
    missing = [p.sample_id for p in pages if p.sample_id not in preds]
    report = aggregate((score_sample(p.sample_id, preds.get(p.sample_id, ""), p.text) for p in pages), sec["tier"])
    report.missing = missing
    d = report.to_dict() | {"duplicates": dup}
    emit(d, report.table(), Path(args.out) if args.out else None)
    return 0


def cmd_eval_order(args, config: dict, seed: int) -> int:
    from callikit.orderformer import evaluate_order, load_order_model

    sec = _merge({"data": None, "split": None, "checkpoint": None}, _section(config, "eval-order"),
                 {"data": args.data, "split": args.split, "checkpoint": args.checkpoint}, "eval-order")
    model, _ = load_order_model(_path(sec["checkpoint"], "--checkpoint"))
    pages = _load_dataset_pages(_path(sec["data"], "--data"), sec["split"])
    ev = evaluate_order(pages, model)
    emit(ev.to_dict(), ev.table(), Path(args.out) if args.out else None)
    return 0


def cmd_decode_align(args, config: dict, seed: int) -> int:
    from callikit.callialign import char_accuracy, heldout_set, load_align, nn_decode, predict_align

    model, setup, _ = load_align(_path(args.checkpoint, "--checkpoint"))
    if args.features:
        feats = np.load(_path(args.features, "--features"))
        if feats.ndim == 2:
            feats = feats[None]
        ids = None
    else:
        ids, feats = heldout_set(setup, args.count, seed)
    if feats.ndim != 3 or feats.shape[-1] != model.cfg.feat_dim:
        raise _input(f"features must have shape (n, v, {model.cfg.feat_dim}), got {feats.shape}")
    pred = predict_align(model, feats)
    tok, score = nn_decode(pred, setup.table)
    lookup = setup.tokenizer.lookup()
    decoded = []
    for row in tok.tolist():
        key = tuple(t for t in row if t != 0)
        decoded.append(lookup.get(key, -1))
    report = {"count": len(feats), "tokens": tok.tolist(), "chars": decoded, "min_score": float(score.min()) if score.size else None}
    if ids is not None:
        report["char_ids"] = ids.tolist()
        report["accuracy"] = char_accuracy(pred, ids, setup)
    table = f"decoded {len(feats)} characters" + (f", accuracy {report['accuracy']:.4f}" if ids is not None else "")
    emit(report, table, Path(args.out) if args.out else None)
    return 0


def cmd_pilot_noise(args, config: dict, seed: int) -> int:
    from callikit.pilots import NoiseGridConfig, default_noise_table, monotone_violations, noise_grid

    sec = _merge(_defaults(NoiseGridConfig), _section(config, "pilot-noise"),
                 {"mu_steps": args.steps, "sigma_steps": args.steps, "sentences": args.sentences}, "pilot-noise")
    cfg = _build(NoiseGridConfig, seed=seed, **sec)
    grid = noise_grid(default_noise_table(cfg), cfg, threads=args.threads)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        grid.write_csv(out / "noise_grid.csv")
        write_run(out, "pilot-noise", seed, {k: v for k, v in asdict(cfg).items() if k != "seed"}, {})
    viol = monotone_violations(grid)
    emit(
        {"mus": grid.mus.tolist(), "sigmas": grid.sigmas.tolist(), "fidelity": np.round(grid.fidelity, 4).tolist(),
         "origin": grid.at(0.0, 0.0), "max_violation": max((v[3] for v in viol), default=0.0)},
        grid.to_csv().rstrip("\n"),
    )
    return 0


def cmd_pilot_slicing(args, config: dict, seed: int) -> int:
    from callikit.pilots import slicing_pilot

    sec = _merge({"n_chars": 64, "slice_px": 224.0}, _section(config, "pilot-slicing"), {"n_chars": args.chars}, "pilot-slicing")
    rep = slicing_pilot(sec["n_chars"], seed, sec["slice_px"])
    d = {k: v.to_dict() for k, v in rep.items()}
    table = "\n".join(
        [f"{'policy':<10}{'uncut':>8}{'fragments':>11}"]
        + [f"{k:<10}{v.uncut_fraction:>8.3f}{v.mean_fragments:>11.3f}" for k, v in rep.items()]
    )
    out = Path(args.out) if args.out else None
    emit(d, table, out, "slicing.json")
    if out is not None:
        write_run(out, "pilot-slicing", seed, sec, {})
    return 0


def cmd_stats(args, config: dict, seed: int) -> int:
    from callikit.ingest import dataset_stats

    pages = _load_dataset_pages(_path(args.data, "--data"), args.split)
    st = dataset_stats(pages)
    emit(st.to_dict(), st.table(), Path(args.out) if args.out else None)
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file or a previous run.json")
    common.add_argument("--seed", type=int, help="global seed (overrides CALLI_SEED and the config)")
    common.add_argument("--threads", type=int, default=1, help="worker/thread cap (default 1)")
    common.add_argument("--log-level", default="WARNING")

    p = _Parser(prog="callikit", description="Calligraphy page tools: synthetic data, reading order, alignment, pilots.")
    p.add_argument("--version", action="version", version=f"callikit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", help="output directory")
    s.add_argument("--count", type=int)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train-order", parents=[common], help="train the reading-order model")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--split")
    s.add_argument("--out", help="checkpoint directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr0", type=float)
    s.set_defaults(func=cmd_train_order)

    s = sub.add_parser("train-align", parents=[common], help="train the character alignment model")
    s.add_argument("--out", help="checkpoint directory")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--vocab", type=int)
    s.add_argument("--loss", choices=["l2", "l2+rat", "l2+crd"])
    s.set_defaults(func=cmd_train_align)

    s = sub.add_parser("order", parents=[common], help="reading order of one page")
    s.add_argument("page", help="page JSON (internal or LabelMe)")
    s.add_argument("--checkpoint", help="order model; without it the rule baseline is used")
    s.add_argument("--out")
    s.set_defaults(func=cmd_order)

    s = sub.add_parser("eval", parents=[common], help="score predictions against a dataset")
    s.add_argument("--pred", help="predictions JSONL")
    s.add_argument("--data", help="ground-truth dataset directory")
    s.add_argument("--split")
    s.add_argument("--tier", choices=["easy", "medium", "hard"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("eval-order", parents=[common], help="reading-order accuracy of a model on a dataset")
    s.add_argument("--data")
    s.add_argument("--split")
    s.add_argument("--checkpoint")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_order)

    s = sub.add_parser("decode-align", parents=[common], help="decode character features with an alignment model")
    s.add_argument("--checkpoint")
    s.add_argument("--features", help=".npy array (n, v, d_v); default synthesizes --count characters")
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--out")
    s.set_defaults(func=cmd_decode_align)

    s = sub.add_parser("pilot", parents=[common], help="pilot studies")
    psub = s.add_subparsers(dest="pilot", parser_class=_Parser)
    n = psub.add_parser("noise", parents=[common], help="embedding-noise tolerance grid")
    n.add_argument("--out", help="directory for noise_grid.csv and run.json")
    n.add_argument("--steps", type=int, help="grid steps per axis")
    n.add_argument("--sentences", type=int)
    n.set_defaults(func=cmd_pilot_noise)
    sl = psub.add_parser("slicing", parents=[common], help="slice-policy fragmentation")
    sl.add_argument("--chars", type=int)
    sl.add_argument("--out")
    sl.set_defaults(func=cmd_pilot_slicing)

    s = sub.add_parser("stats", parents=[common], help="dataset statistics")
    s.add_argument("--data")
    s.add_argument("--split")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)
    return p


def _error_line(code: int, kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())}), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    from callikit.ingest import ParseError
    from callikit.nn.checkpoint import CheckpointError
    from callikit.preprocess import CapacityError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise _usage("missing command (see --help)")
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr)
        if args.threads < 1:
            raise _usage("--threads must be >= 1")
        import torch

        torch.set_num_threads(args.threads)
        config = load_config(args.config)
        seed = resolve_seed(args, config)
        return args.func(args, config, seed)
    except CliError as exc:
        _error_line(exc.code, exc.kind, str(exc))
        return exc.code
    except CapacityError as exc:
        _error_line(EXIT_CAPACITY, "capacity", str(exc))
        return EXIT_CAPACITY
    except (ParseError, CheckpointError, FileNotFoundError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        _error_line(EXIT_INPUT, "input", str(exc))
        return EXIT_INPUT
    except ValueError as exc:
        # settings are validated up front, so what remains is bad input data
        _error_line(EXIT_INPUT, "input", str(exc))
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        _error_line(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
