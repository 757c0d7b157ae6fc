"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime, numeric or
file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from anomem.checkpoint import ModelState, load_dataset, load_model, save_dataset, save_model
from anomem.config import ExperimentConfig
from anomem.data import make_one_vs_all_split
from anomem.detect import detector_score
from anomem.errors import AnoMemError, ValidationError
from anomem.evaluate import SWEEP_AXES, auroc, sweep
from anomem.memory import memory_summary
from anomem.pipeline import load_data
from anomem.train import train_stage1, train_stage2

COMMANDS = ("gen-data", "train-stage1", "train-stage2", "score", "eval", "sweep", "inspect-memory")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anomem", description="Memory-based anomaly detection.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", type=Path, help="experiment config (JSON)")
        c.add_argument("--seed", type=int, help="overrides the config seed")
        c.add_argument("-v", "--verbose", action="store_true")
        return c

    c = cmd("gen-data", "generate (or ingest) the image set and write it as a container")
    c.add_argument("--out", type=Path, required=True)

    c = cmd("train-stage1", "train encoder and memories on the protocol training split")
    c.add_argument("--in", dest="inp", type=Path, help="image set container (default: generate)")
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--telemetry", type=Path, help="JSON-lines per-epoch loss log")

    c = cmd("train-stage2", "fit the per-scale heads on a stage-1 checkpoint")
    c.add_argument("--ckpt", type=Path, required=True)
    c.add_argument("--in", dest="inp", type=Path)
    c.add_argument("--out", type=Path, required=True)

    c = cmd("score", "emit one JSON score record per input image")
    c.add_argument("--ckpt", type=Path, required=True)
    c.add_argument("--in", dest="inp", type=Path, required=True)
    c.add_argument("--mode", choices=("one-class", "ssad"), default="one-class")
    c.add_argument("--out", type=Path, help="write records here instead of stdout")

    c = cmd("eval", "AUROC of score records against an image set's labels")
    c.add_argument("--scores", type=Path, required=True)
    c.add_argument("--labels", type=Path, required=True)

    c = cmd("sweep", "run the pipeline over a grid of one axis")
    c.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    c.add_argument("--grid", required=True, help="comma-separated values")
    c.add_argument("--seeds", help="comma-separated seeds (default: config)")
    c.add_argument("--out", type=Path)

    c = cmd("inspect-memory", "print memory sizes, beta, prototype distances and norms")
    c.add_argument("--ckpt", type=Path, required=True)
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _data(args, cfg):
    return load_dataset(args.inp) if getattr(args, "inp", None) else load_data(cfg, cfg.seed)


def _train_split(cfg, data):
    pr = cfg.protocol
    split = make_one_vs_all_split(data, pr.normal_class, pr.gamma, cfg.seed, pr.n_test, pr.n_train_normal)
    return split.train_set(data)


def _emit(lines, out: Path | None) -> None:
    text = "".join(line + "\n" for line in lines)
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _gen_data(args):
    cfg = _config(args)
    save_dataset(args.out, load_data(cfg, cfg.seed))


def _train_stage1(args):
    cfg = _config(args)
    train = _train_split(cfg, _data(args, cfg))
    if cfg.mode == "one-class":
        train = train.subset(np.flatnonzero(train.labels == 1))
    res = train_stage1(cfg, train, cfg.seed, args.telemetry or cfg.paths.get("telemetry"))
    velocities = res.optimizer.velocities if res.optimizer else []
    save_model(args.out, ModelState(cfg, res.encoder, res.memories, optimizer=velocities))
    if res.history:
        print(json.dumps(res.history[-1]))


def _train_stage2(args):
    model = load_model(args.ckpt)
    cfg = _config(args) if args.config else model.config
    if args.seed is not None and not args.config:
        cfg = cfg.replace(seed=args.seed)
    train = _train_split(cfg, _data(args, cfg))
    res = train_stage2(cfg, train, model.encoder, model.memories, cfg.seed)
    model.heads = res.heads
    save_model(args.out, ModelState(cfg, model.encoder, model.memories, res.heads, model.optimizer))
    print(json.dumps({"initial_loss": res.initial_loss, "final_loss": res.final_loss}))


def _score(args):
    model = load_model(args.ckpt)
    cfg = model.config
    data = load_dataset(args.inp)
    if args.mode == "ssad" and not model.heads:
        raise ValidationError("checkpoint has no stage-2 heads; run train-stage2 or use --mode one-class")
    scores = detector_score(
        data.images,
        model.encoder,
        model.memories,
        cfg.scale_weights().lambdas,
        args.mode,
        model.heads if args.mode == "ssad" else None,
        cfg.active_scales,
        cfg.normalize_before_memory,
    )
    _emit((s.to_json(i) for i, s in enumerate(scores)), args.out)


def _read_scores(path: Path) -> dict:
    text = path.read_text().strip()
    try:
        if text.startswith("["):
            records = json.loads(text)
        else:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
        return {r["id"]: float(r["fused"]) for r in records}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: not a list of score records ({exc})") from exc


def _eval(args):
    scores = _read_scores(args.scores)
    data = load_dataset(args.labels)
    if sorted(scores) != list(range(len(data))):
        raise ValidationError(f"{len(scores)} score records do not match {len(data)} labelled images")
    values = [scores[i] for i in range(len(data))]
    print(json.dumps({"auroc": auroc(values, 1 - np.asarray(data.labels))}))


def _parse_list(text: str, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad list {text!r}: {exc}") from exc


def _sweep(args):
    cfg = _config(args)
    cast = int if args.axis == "memory_size" else float
    seeds = _parse_list(args.seeds, int) if args.seeds else None
    reports = sweep(args.axis, _parse_list(args.grid, cast), cfg, seeds=seeds)
    _emit((r.to_json() for r in reports), args.out)


def _inspect_memory(args):
    model = load_model(args.ckpt)
    for s, mem in enumerate(model.memories):
        print(json.dumps({"scale": s + 1, **memory_summary(mem)}))


_HANDLERS = {
    "gen-data": _gen_data,
    "train-stage1": _train_stage1,
    "train-stage2": _train_stage2,
    "score": _score,
    "eval": _eval,
    "sweep": _sweep,
    "inspect-memory": _inspect_memory,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"anomem: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _HANDLERS[args.command](args)
    except ValidationError as exc:
        print(f"anomem: invalid input: {exc}", file=sys.stderr)
        return 1
    except (AnoMemError, OSError) as exc:
        print(f"anomem: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
