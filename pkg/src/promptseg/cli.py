"""Command-line entry point.

Subcommands: engine run, engine resume, dataset stats, dataset convert-coco,
train, eval, report, serve. A JSON config file supplies structured options;
flags override it. Every run logs the fully resolved configuration. Exit
codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

log = logging.getLogger("promptseg")

CONFIG_SECTIONS = ("backend", "engine", "model", "train", "eval", "review", "groups")


class UsageError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        config = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    unknown = set(config) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)} (expected subset of {CONFIG_SECTIONS})")
    return config


def _section(config: dict, name: str, cls):
    """Instantiate a dataclass from a config section, rejecting unknown keys."""
    data = dict(config.get(name, {}))
    allowed = {f.name for f in dataclass_fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return cls(**data)


def _log_resolved(config: dict, out_dir: Path | None) -> None:
    resolved = json.dumps(config, indent=2, sort_keys=True, default=str)
    log.info("resolved config:\n%s", resolved)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(resolved + "\n", encoding="utf-8")


def _list_images(images_dir: str) -> list:
    from PIL import Image

    from .core import ImageRecord

    root = Path(images_dir)
    if not root.is_dir():
        raise UsageError(f"image directory not found: {root}")
    records = []
    for path in sorted(root.iterdir()):
        if path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        with Image.open(path) as img:
            width, height = img.size
        records.append(ImageRecord(image_id=path.stem, uri=str(path), width=width, height=height))
    if not records:
        raise UsageError(f"no images found in {root}")
    return records


def _backend_config(config: dict, args):
    from .backends import BackendConfig

    backend = _section(config, "backend", BackendConfig)
    if getattr(args, "fixtures", None):
        backend.fixtures_dir = args.fixtures
    if getattr(args, "seed", None) is not None:
        backend.seed = args.seed
    return backend


def _cmd_engine(args, config: dict) -> int:
    from .core import ConceptFamily
    from .engine import EngineConfig, run_pipeline

    out_dir = Path(args.out)
    backend = _backend_config(config, args)
    engine_section = dict(config.get("engine", {}))
    concepts = engine_section.pop("concepts", None)
    allowed = {f.name for f in dataclass_fields(EngineConfig)} - {"out_dir", "backend_cfg", "concepts"}
    unknown = set(engine_section) - allowed
    if unknown:
        raise UsageError(f"unknown keys in config section 'engine': {sorted(unknown)}")
    cfg = EngineConfig(out_dir=out_dir, backend_cfg=backend, **engine_section)
    if concepts:
        cfg.concepts = tuple(ConceptFamily(c) for c in concepts)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.resume and not cfg.resolved_cache_dir().is_dir():
        raise UsageError(f"nothing to resume: cache directory {cfg.resolved_cache_dir()} does not exist")

    records = _list_images(args.images)
    _log_resolved({"backend": backend.__dict__, "engine": {**engine_section, "out_dir": str(out_dir)}}, out_dir)
    result = run_pipeline(records, cfg)
    print(
        json.dumps(
            {
                "manifest": str(result.manifest_path),
                "audit": str(result.audit_path),
                "samples": len(result.manifest.samples),
                "cache_hits": result.cache_hits,
                "cache_misses": result.cache_misses,
            },
            indent=2,
        )
    )
    return 0


def _cmd_dataset_stats(args, config: dict) -> int:
    from .core import load_manifest, manifest_stats

    stats = manifest_stats(load_manifest(args.manifest))
    print(json.dumps(stats.to_json(), indent=2))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "stats.json").write_text(json.dumps(stats.to_json(), indent=2) + "\n", encoding="utf-8")
        from .reporting import render_split_distribution

        figure = render_split_distribution(stats, out_dir / "split_distribution.png")
        log.info("wrote %s", figure)
    return 0


def _cmd_convert_coco(args, config: dict) -> int:
    from .convert import convert_coco_instances

    manifest_path = convert_coco_instances(
        annotations_path=args.annotations,
        images_dir=args.images,
        out_path=args.out,
        split=args.split,
        prompt_template=args.prompt_template,
    )
    print(json.dumps({"manifest": str(manifest_path)}, indent=2))
    return 0


def _cmd_train(args, config: dict, parser: argparse.ArgumentParser) -> int:
    import torch

    from .core import load_manifest
    from .model import ModelConfig, build_model
    from .reporting import render_loss_curve
    from .training import DataGroup, TrainConfig, load_train_checkpoint, train_phase

    train_cfg = _section(config, "train", TrainConfig)
    train_cfg.phase = args.phase
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.phase == 2 and not args.init_checkpoint:
        parser.error("--phase 2 requires --init-checkpoint (phase 2 initializes from a phase-1 checkpoint)")

    groups_section = config.get("groups", {})
    if not groups_section:
        raise UsageError("config must provide a 'groups' section mapping group ids to manifest paths")
    groups = [DataGroup(id=gid, manifest=load_manifest(path)) for gid, path in groups_section.items()]

    if args.init_checkpoint:
        model, _, _, model_cfg = load_train_checkpoint(args.init_checkpoint)
    else:
        model_cfg = _section(config, "model", ModelConfig)
        if args.seed is not None:
            model_cfg.seed = args.seed
        model = build_model(model_cfg)

    out_dir = Path(args.out)
    _log_resolved({"train": train_cfg.__dict__, "model": model.cfg.to_json()}, out_dir)
    torch.set_num_threads(args.threads)
    result = train_phase(model, train_cfg, groups, out_dir)
    figure = render_loss_curve(result.log_path, out_dir / "loss_curve.png")
    print(
        json.dumps(
            {
                "checkpoint": str(result.checkpoint_path),
                "loss_log": str(result.log_path),
                "loss_curve": str(figure),
                "final_loss": result.final_loss,
            },
            indent=2,
        )
    )
    return 0


def _cmd_eval(args, config: dict) -> int:
    from .core import load_manifest
    from .evaluation import evaluate_predictions, predict_dataset, save_predictions, write_evaluation
    from .model import EmbeddingCache
    from .reporting import render_concept_bars
    from .training import load_train_checkpoint

    eval_section = dict(config.get("eval", {}))
    unknown = set(eval_section) - {"threshold"}
    if unknown:
        raise UsageError(f"unknown keys in config section 'eval': {sorted(unknown)}")
    threshold = args.threshold if args.threshold is not None else float(eval_section.get("threshold", 0.5))

    manifest = load_manifest(args.manifest)
    model, _, _, _ = load_train_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    _log_resolved({"eval": {"threshold": threshold, "checkpoint": args.checkpoint}}, out_dir)
    preds = predict_dataset(model, manifest, threshold=threshold, cache=EmbeddingCache())
    save_predictions(preds, out_dir / "predictions.jsonl")
    result = evaluate_predictions(preds, manifest)
    paths = write_evaluation(result, out_dir)
    figure = render_concept_bars(result.report, out_dir / "per_concept.png")
    print(result.to_text())
    print(json.dumps({k: str(v) for k, v in {**paths, "figure": figure}.items()}, indent=2))
    return 0


def _cmd_report(args, config: dict) -> int:
    from .core import load_manifest
    from .evaluation import evaluate_predictions, load_predictions, write_evaluation
    from .reporting import render_concept_bars, render_loss_curve

    out_dir = Path(args.out)
    outputs: dict[str, str] = {}
    if args.predictions:
        manifest = load_manifest(args.manifest)
        preds = load_predictions(args.predictions)
        result = evaluate_predictions(preds, manifest)
        paths = write_evaluation(result, out_dir)
        outputs.update({k: str(v) for k, v in paths.items()})
        outputs["figure"] = str(render_concept_bars(result.report, out_dir / "per_concept.png"))
        print(result.to_text())
    if args.loss_log:
        outputs["loss_curve"] = str(render_loss_curve(args.loss_log, out_dir / "loss_curve.png"))
    if not outputs:
        raise UsageError("report needs --predictions (with --manifest) and/or --loss-log")
    print(json.dumps(outputs, indent=2))
    return 0


def _cmd_serve(args, config: dict) -> int:
    from .review import ReviewStore, load_candidates
    from .review.service import serve

    review_section = dict(config.get("review", {}))
    unknown = set(review_section) - {"lease_seconds"}
    if unknown:
        raise UsageError(f"unknown keys in config section 'review': {sorted(unknown)}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = ReviewStore(
        load_candidates(args.candidates),
        out_dir / "verdicts.jsonl",
        lease_seconds=float(review_section.get("lease_seconds", 600.0)),
    )
    _log_resolved({"review": {"candidates": args.candidates, "port": args.port}}, out_dir)
    ui_dir = Path(args.ui_dir) if args.ui_dir else None
    serve(store, port=args.port, static_dir=ui_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptseg", description=__doc__)
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int, help="seed for every stochastic component")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    engine = sub.add_parser("engine", help="data engine")
    engine_sub = engine.add_subparsers(dest="engine_command", required=True)
    for name in ("run", "resume"):
        p = engine_sub.add_parser(name)
        p.add_argument("--images", required=True, help="directory of input images")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--fixtures", help="fixtures directory (enables mock backends)")

    dataset = sub.add_parser("dataset", help="manifest utilities")
    dataset_sub = dataset.add_subparsers(dest="dataset_command", required=True)
    stats = dataset_sub.add_parser("stats")
    stats.add_argument("--manifest", required=True)
    stats.add_argument("--out", help="also write stats.json and a distribution figure here")
    convert = dataset_sub.add_parser("convert-coco")
    convert.add_argument("--annotations", required=True, help="COCO instances JSON")
    convert.add_argument("--images", required=True, help="image directory referenced by the manifest")
    convert.add_argument("--out", required=True, help="output manifest path")
    convert.add_argument("--split", default="train")
    convert.add_argument("--prompt-template", default="segment all the {category} in the image")

    train = sub.add_parser("train", help="run one training phase")
    train.add_argument("--phase", type=int, choices=(1, 2), required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--init-checkpoint", help="phase-1 checkpoint to initialize from")
    train.add_argument("--threads", type=int, default=4)

    ev = sub.add_parser("eval", help="predict a manifest and score it")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--threshold", type=float)

    report = sub.add_parser("report", help="re-render reports and figures")
    report.add_argument("--manifest")
    report.add_argument("--predictions")
    report.add_argument("--loss-log")
    report.add_argument("--out", required=True)

    serve_p = sub.add_parser("serve", help="human-verification review service")
    serve_p.add_argument("--candidates", required=True, help="candidate manifest (JSONL)")
    serve_p.add_argument("--out", required=True, help="directory for the verdict log and exports")
    serve_p.add_argument("--port", type=int, default=8701)
    serve_p.add_argument("--ui-dir", help="override the bundled static UI directory")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = _load_config(args.config)
        if args.command == "engine":
            args.resume = args.engine_command == "resume"
            return _cmd_engine(args, config)
        if args.command == "dataset":
            if args.dataset_command == "stats":
                return _cmd_dataset_stats(args, config)
            return _cmd_convert_coco(args, config)
        if args.command == "train":
            return _cmd_train(args, config, parser)
        if args.command == "eval":
            return _cmd_eval(args, config)
        if args.command == "report":
            return _cmd_report(args, config)
        if args.command == "serve":
            return _cmd_serve(args, config)
        parser.error(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # parser.error inside subcommands
        return int(exc.code or 0)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        log.error("%s", exc, exc_info=args.verbose)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
