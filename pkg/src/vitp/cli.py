"""Command-line entry point: ``vitp <command> [options]``.

Exit codes: 0 success, 1 usage or config error, 2 data/format error,
3 numeric failure (non-finite values, failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig
from .gradcheck import run_gradcheck
from .metrics import UPPER_BOUND_MODES, Evaluator, upper_bound_relabel
from .model import init_params, load_pretrained, predict_proba
from .pipeline import POINT_RULES, assemble, classify_proposals
from .structures import TASKS
from .synth import Dataset, generate, synth_proposals
from .tensor import NonFiniteError
from .trainer import TrainingError, eval_classifier, steps_per_epoch, train

log = logging.getLogger("vitp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- shared helpers ----------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(synth={"seed": args.seed}, train={"seed": args.seed},
                                 model={"init_seed": args.seed}, eval={"seed": args.seed})
    return cfg


def _read_dataset(path) -> Dataset:
    if not Path(path).is_dir():
        raise DataError(f"dataset directory {path} does not exist")
    return io.read_dataset(path)


def _model_config(cfg: RunConfig, data: Dataset):
    if not data.images:
        raise DataError("dataset has no images")
    return cfg.model_config(len(data.taxonomy), data.images[0].hw)


def _load_proposals(directory, images: list) -> list:
    out = []
    for ann in images:
        path = io.proposal_path(directory, ann.image_id)
        if not path.exists():
            raise DataError(f"missing proposal file {path}")
        proposals = io.read_proposals(path)
        if proposals.hw != ann.hw:
            raise DataError(f"{path}: proposal size {proposals.hw} does not match image {ann.hw}")
        out.append(proposals)
    return out


def _tasks(choice: str) -> list:
    return list(TASKS) if choice == "all" else [choice]


def _assemble_kwargs(cfg: RunConfig) -> dict:
    e = cfg.eval
    return {"semantic": {}, "instance": {"score_thresh": e.instance_score_thresh},
            "panoptic": {"object_thresh": e.object_thresh, "overlap_thresh": e.overlap_thresh}}


def _evaluate(pairs, data: Dataset, tasks: list, cfg: RunConfig, out_dir=None) -> dict:
    """Assemble and score every (proposals, annotation) pair; optionally save results."""
    kwargs = _assemble_kwargs(cfg)
    evaluators = {t: Evaluator(t, len(data.taxonomy)) for t in tasks}
    for proposals, ann in pairs:
        gt = ann.ground_truth(data.taxonomy)
        for task in tasks:
            result = assemble(proposals, data.taxonomy, task, **kwargs[task])
            evaluators[task].add(result, gt)
            if out_dir is not None:
                _save_result(result, ann.image_id, out_dir)
    return {t: ev.report().to_dict() for t, ev in evaluators.items()}


def _save_result(result, image_id: str, out_dir: Path) -> None:
    if result.task == "semantic":
        ids = np.where(result.semantic_map < 0, io.VOID_ID, result.semantic_map)
        io.write_pgm16(ids, out_dir / f"semantic_{image_id}.pgm")
    elif result.task == "panoptic":
        ids, table = result.panoptic
        io.write_pgm16(ids, out_dir / f"panoptic_{image_id}.pgm")
        io.write_json({str(k): {"class_id": c, "is_thing": t} for k, (c, t) in table.items()},
                      out_dir / f"panoptic_{image_id}.json")
    else:
        io.write_json([{"class_id": c, "score": s, "pixels": np.flatnonzero(m).tolist()}
                       for m, c, s in result.instances], out_dir / f"instance_{image_id}.json")


def _rescore(images: list, proposals: list, params, model_cfg, rule: str, fusion, cfg: RunConfig) -> tuple:
    """Fused proposal sets for every image plus the number of dropped proposals.

    With alpha 0 the point classifier has no say, so proposals pass through untouched.
    """
    if fusion.alpha == 0.0:
        return list(proposals), 0

    def predict(image, batch):
        return predict_proba(image, batch, params, model_cfg, cfg.eval.pad_points, cfg.eval.seed)

    fused, dropped = [], 0
    for ann, props in zip(images, proposals):
        rng = np.random.default_rng([cfg.eval.seed, int(ann.image_id)])
        new, n_drop = classify_proposals(ann.image, props, predict, rule, fusion, rng)
        fused.append(new)
        dropped += n_drop
    return fused, dropped


def _emit(payload: dict, path=None) -> None:
    text = io.dumps(payload)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(text)


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    synth_cfg = cfg.synth_config()
    data = generate(synth_cfg)
    out = Path(args.out_dir)
    io.write_dataset(data, out)
    prop_dir = out / "proposals"
    prop_dir.mkdir(exist_ok=True)
    k = len(data.taxonomy)
    for ann in data.val:
        index = int(ann.image_id)
        io.write_proposals(synth_proposals(ann, k, synth_cfg.proposal_noise, synth_cfg.seed, index),
                           io.proposal_path(prop_dir, ann.image_id))
    summary = {"command": "synth", "config": cfg.to_dict(), "seed": cfg.synth.seed,
               "train_images": len(data.train), "val_images": len(data.val),
               "segments": sum(len(a.segments) for a in data.images),
               "proposal_files": len(data.val)}
    _emit(summary, out / "synth_summary.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = _read_dataset(args.data)
    model_cfg = _model_config(cfg, data)
    train_cfg = cfg.train_config(args.stage)
    images = data.train
    if not images:
        raise DataError("dataset has no training images")
    if args.stage == "box" and not any(a.boxes for a in images):
        raise DataError("box stage needs box annotations")
    if args.stage == "point":
        for source in train_cfg.annotation_sources:
            maps = [a.fine if source == "fine" else a.coarse for a in images]
            if not any((m != io.VOID_ID).any() for m in maps):
                raise DataError(f"point stage needs {source} annotations")
    total = steps_per_epoch(len(images), train_cfg.batch_size) * train_cfg.epochs
    if train_cfg.epochs and train_cfg.warmup_steps > total:
        raise ConfigError(f"schedule.warmup_steps ({train_cfg.warmup_steps}) exceeds the run's "
                          f"{total} optimizer steps")
    params = init_params(model_cfg, cfg.model.init_seed)
    load_report = {}
    if args.init_checkpoint:
        load_report = load_pretrained(params, io.read_checkpoint(args.init_checkpoint),
                                      skip_scratch=cfg.train.skip_scratch)
    result = train(params, images, model_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_checkpoint(params, out / "checkpoint.vtpc")
    io.write_jsonl(result.steps, out / "train_log.jsonl")
    summary = {"command": "train", "stage": args.stage, "config": cfg.to_dict(), "seed": cfg.train.seed,
               "model": model_cfg.to_dict(), "steps": len(result.steps), "epochs": result.epochs,
               "init_checkpoint": args.init_checkpoint, "load_report": load_report}
    if data.val:
        summary["val_accuracy"] = eval_classifier(params, data.val, model_cfg, cfg.eval.point_rule,
                                                  cfg.eval.seed, pad_to=cfg.eval.pad_points).to_dict()
    _emit(summary, out / "train_summary.json")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    data = _read_dataset(args.data)
    model_cfg = _model_config(cfg, data)
    alpha = cfg.fusion.alpha if args.alpha is None else args.alpha
    fusion = cfg.fusion_config(alpha)
    rule = args.point_rule or cfg.eval.point_rule
    params = init_params(model_cfg, cfg.model.init_seed)
    load_pretrained(params, io.read_checkpoint(args.checkpoint))
    images = data.val
    proposals = _load_proposals(args.proposals, images)

    fused, dropped = _rescore(images, proposals, params, model_cfg, rule, fusion, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = _evaluate(zip(fused, images), data, _tasks(args.task), cfg, out)
    _emit({"command": "infer", "config": cfg.to_dict(), "seed": cfg.eval.seed, "alpha": alpha,
           "point_rule": rule, "checkpoint": str(args.checkpoint), "dropped_proposals": dropped,
           "reports": reports}, out / "metrics.json")
    return EXIT_OK


def cmd_upper_bound(args) -> int:
    cfg = _load_config(args)
    data = _read_dataset(args.data)
    images = data.val
    proposals = _load_proposals(args.proposals, images)
    relabelled, dropped = [], 0
    for ann, props in zip(images, proposals):
        new, n_drop = upper_bound_relabel(props, ann.ground_truth(data.taxonomy), args.mode)
        relabelled.append(new)
        dropped += n_drop
    reports = _evaluate(zip(relabelled, images), data, _tasks(args.task), cfg)
    _emit({"command": "upper-bound", "config": cfg.to_dict(), "seed": cfg.eval.seed, "mode": args.mode,
           "dropped_proposals": dropped, "reports": reports}, args.out)
    return EXIT_OK


def _parse_grid(axis: str, grid: str | None) -> list:
    if axis == "rule":
        values = grid.split(",") if grid else list(POINT_RULES)
        bad = [v for v in values if v not in POINT_RULES]
        if bad:
            raise UsageError(f"unknown point rule(s) {bad}")
        return values
    if not grid:
        return [0.0, 0.4, 1.0] if axis == "alpha" else [1, 4, 16, 64]
    try:
        return [float(v) if axis == "alpha" else int(v) for v in grid.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --grid {grid!r}: {exc}") from exc


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    data = _read_dataset(args.data)
    model_cfg = _model_config(cfg, data)
    grid = _parse_grid(args.axis, args.grid)
    images = data.val
    proposals = _load_proposals(args.proposals, images)
    base = init_params(model_cfg, cfg.model.init_seed)
    if args.checkpoint:
        load_pretrained(base, io.read_checkpoint(args.checkpoint))
    elif args.axis != "points":
        raise UsageError("--checkpoint is required for the rule and alpha axes")
    rows = []
    for value in grid:
        params, rule, alpha = base, cfg.eval.point_rule, cfg.fusion.alpha
        if args.axis == "rule":
            rule = value
        elif args.axis == "alpha":
            alpha = value
        else:
            run = cfg.with_overrides(train={"points_per_image": value})
            params = base.copy()
            train(params, data.train, model_cfg, run.train_config("point"))
        fused, _ = _rescore(images, proposals, params, model_cfg, rule, cfg.fusion_config(alpha), cfg)
        reports = _evaluate(zip(fused, images), data, list(TASKS), cfg)
        rows.append({args.axis: value, "PQ": reports["panoptic"]["value"], "AP": reports["instance"]["value"],
                     "mIoU": reports["semantic"]["value"]})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(rows, [args.axis, "PQ", "AP", "mIoU"], args.out)
    io.write_json({"command": "ablate", "axis": args.axis, "grid": grid, "config": cfg.to_dict(),
                   "seed": cfg.eval.seed, "rows": rows}, Path(args.out).with_suffix(".json"))
    print(Path(args.out).read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    corrupt = None
    if args.corrupt:
        def corrupt(name, grad):
            if name == args.corrupt:
                grad.reshape(-1)[0] += 1e-2 * (1.0 + abs(grad.reshape(-1)[0]))
            return grad
    result = run_gradcheck(seed=args.seed or 0, corrupt=corrupt)
    _emit({"command": "gradcheck", "seed": args.seed or 0, **result.to_dict()})
    return EXIT_OK if result.passed else EXIT_NUMERIC


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vitp", description="Point-prompted mask classification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset with simulated proposals")
    common(p, data=False)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="box pre-training or point fine-tuning")
    common(p)
    p.add_argument("--stage", choices=("box", "point"), required=True)
    p.add_argument("--init-checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="re-score proposals and evaluate")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--proposals", required=True, help="directory of .vtp files")
    p.add_argument("--point-rule", choices=POINT_RULES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--task", choices=(*TASKS, "all"), default="all")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("upper-bound", help="evaluate proposals relabelled from ground truth")
    common(p)
    p.add_argument("--proposals", required=True)
    p.add_argument("--mode", choices=UPPER_BOUND_MODES, required=True)
    p.add_argument("--task", choices=(*TASKS, "all"), default="all")
    p.add_argument("--out", help="write the report here as well")
    p.set_defaults(func=cmd_upper_bound)

    p = sub.add_parser("ablate", help="sweep points, point rule or alpha; writes CSV")
    common(p)
    p.add_argument("--axis", choices=("points", "rule", "alpha"), required=True)
    p.add_argument("--grid", help="comma-separated values")
    p.add_argument("--checkpoint")
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", metavar="PARAM", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"vitp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"vitp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, io.FormatError, KeyError, FileNotFoundError) as exc:
        print(f"vitp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingError) as exc:
        print(f"vitp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
