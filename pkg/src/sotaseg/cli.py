"""Command-line entry point: ``sotaseg <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import persist
from .base import TrainingDiverged, base_forward, ood_score, oracle_segmentor, train_base
from .metrics import MetricAccumulator, reports_table
from .pipeline import PipelineBundle, batch_evaluate, load_base, pipeline_scores, save_base
from .synthesis import SceneDataset, synthesize_dataset
from .training import train_sota

log = logging.getLogger("sotaseg")

# stable exit-code table; documented in --help
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CONFIG = 4
EXIT_DIMENSION = 5
EXIT_OUTPUT_EXISTS = 6
EXIT_DIVERGED = 7
EXIT_FORMAT = 8

EXIT_CODES = {
    EXIT_OK: "ok",
    EXIT_UNEXPECTED: "unexpected",
    EXIT_USAGE: "usage",
    EXIT_MISSING_INPUT: "missing_input",
    EXIT_CONFIG: "config",
    EXIT_DIMENSION: "dimension",
    EXIT_OUTPUT_EXISTS: "output_exists",
    EXIT_DIVERGED: "diverged",
    EXIT_FORMAT: "format",
}

EPILOG = "exit codes:\n" + "\n".join(f"  {code}  {name}" for code, name in EXIT_CODES.items()) + (
    "\n\nerrors are printed to stderr as one JSON line: "
    '{"error": <name>, "exit": <code>, "message": <text>}\n'
    "SOTA_NUM_THREADS bounds the number of torch threads."
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class DimensionError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def _prepare_out(out: Path, overwrite: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise CliError(EXIT_OUTPUT_EXISTS, f"output directory {out} is not empty; pass --overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> config_mod.RunConfig:
    return config_mod.load(args.config, paper=args.paper_scale, seed=args.seed)


def _dataset(path) -> SceneDataset:
    if path is None:
        raise CliError(EXIT_USAGE, "--data is required")
    return SceneDataset(path)


def _check_image_size(shape, what: str) -> None:
    h, w = shape[-2:]
    if h % 16 or w % 16:
        raise DimensionError(f"{what} size {h}x{w} is not divisible by 16")


def _load_images(path: Path) -> list[tuple[str, np.ndarray]]:
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    if path.is_file():
        return [(path.stem, persist.load_png(path, rgb=True))]
    if (path / "manifest.json").exists():
        ds = SceneDataset(path)
        return [(f"{s.index:06d}", s.image) for s in ds]
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise FileNotFoundError(f"no PNG images in {path}")
    return [(p.stem, persist.load_png(p, rgb=True)) for p in files]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(args.out), args.overwrite)
    count = args.count if args.count is not None else cfg.data.train_count
    synthesize_dataset(cfg.synth_config(), count, out, start=args.start)
    config_mod.echo(cfg, out)
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = _config(args)
    data = _dataset(args.data)
    if data.config.num_classes != cfg.base.num_classes:
        raise config_mod.ConfigError("dataset num_classes differs from base.num_classes")
    _check_image_size(data.config.image_size, "dataset image")
    out = _prepare_out(Path(args.out), args.overwrite)
    config_mod.echo(cfg, out)
    result = train_base(data, cfg.base_config())
    save_base(out / "base.ckpt", result.model, step=cfg.base.steps)
    persist.write_json(out / "curve.json", result.curve)
    return EXIT_OK


def cmd_train_sota(args) -> int:
    cfg = _config(args)
    data = _dataset(args.data)
    _check_image_size(data.config.image_size, "dataset image")
    if args.base is None:
        raise CliError(EXIT_USAGE, "--base is required")
    base = load_base(args.base)
    out = _prepare_out(Path(args.out), args.overwrite)
    config_mod.echo(cfg, out)
    val = SceneDataset(args.val) if args.val else None
    tcfg = cfg.train_config()
    result = train_sota(data, base, tcfg, cfg.model_config(), val_dataset=val, eval_cfg=cfg.eval)
    result.bundle.save(out / "sota.ckpt", step=tcfg.max_iter, lora=tcfg.lora if tcfg.lora.finetune == "lora" else None)
    persist.write_json(out / "curve.json", result.curve)
    if result.val_reports:
        persist.write_json(out / "val_reports.json", [[it, r.headline()] for it, r in result.val_reports])
    return EXIT_OK


def _oracle_report(data, cfg, targets):
    acc = MetricAccumulator(cfg.eval)
    for s in data:
        score = ood_score(oracle_segmentor(s, num_classes=data.config.num_classes), cfg.normalization).values
        acc.add(s.index, score.numpy(), s.training_target(targets))
    return acc.report()


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = _dataset(args.data)
    targets = cfg.synth.targets
    if args.mode == "oracle":
        report = _oracle_report(data, cfg, targets)
    elif args.mode == "raw" and args.base is not None:
        base = load_base(args.base)
        report = batch_evaluate(data, lambda im: ood_score(base_forward(im, base), cfg.normalization).values,
                                cfg.eval, on_missing=args.on_missing, targets=targets)
    else:
        if args.bundle is None:
            raise CliError(EXIT_USAGE, f"--bundle is required for mode {args.mode}")
        bundle = PipelineBundle.load(args.bundle)
        source = {"pipeline": "final", "raw": "raw", "decoder": "decoder"}[args.mode]
        report = batch_evaluate(data, pipeline_scores(bundle, source), cfg.eval,
                                on_missing=args.on_missing, targets=targets)
    out = _prepare_out(Path(args.out), args.overwrite)
    config_mod.echo(cfg, out)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "table.csv").write_text(reports_table([(args.mode, report)]), encoding="utf-8")
    print(json.dumps(report.headline(), sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    if args.bundle is None:
        raise CliError(EXIT_USAGE, "--bundle is required")
    images = _load_images(Path(args.input))
    for name, image in images:
        _check_image_size(image.shape, f"image {name}")
    bundle = PipelineBundle.load(args.bundle)
    out = _prepare_out(Path(args.out), args.overwrite)
    config_mod.echo(cfg, out)
    for name, image in images:
        final, inter = bundle.run(torch.from_numpy(image))
        target = out / name
        target.mkdir(exist_ok=True)
        persist.save_png(target / "image.png", image)
        persist.save_tensor(target / "final.sota", final.numpy().astype(np.float32))
        for key, value in inter.items():
            if value is None:
                continue
            arr = value.numpy()
            arr = arr.astype(np.uint8) if arr.dtype == np.uint8 else arr.astype(np.float32)
            persist.save_tensor(target / f"{key}.sota", arr)
    return EXIT_OK


def cmd_viz(args) -> int:
    from .viz import render_directory

    out = _prepare_out(Path(args.out), args.overwrite)
    render_directory(args.pred, out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench

    cfg = _config(args)
    if args.bundle is None:
        raise CliError(EXIT_USAGE, "--bundle is required")
    data = _dataset(args.data)
    if len(data) == 0:
        raise CliError(EXIT_MISSING_INPUT, "dataset is empty")
    bundle = PipelineBundle.load(args.bundle)
    images = [data[i].image for i in range(min(args.limit, len(data)))]
    report = bench(bundle, images, args.repetitions)
    out = _prepare_out(Path(args.out), args.overwrite)
    config_mod.echo(cfg, out)
    persist.write_json(out / "bench.json", report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import ABLATIONS, run_seeds

    cfg = _config(args)
    out = _prepare_out(Path(args.out), args.overwrite)
    config_mod.echo(cfg, out)
    ablations = () if args.no_ablations else ABLATIONS
    summary = run_seeds(cfg, seeds=tuple(args.seeds), ablations=ablations)
    persist.write_json(out / "summary.json", summary.to_dict())
    print(json.dumps(summary.to_dict()["median"], sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty --out")
    common.add_argument("--paper-scale", action="store_true",
                        help="256 px scenes, 256-wide features, 15x15 kernel x 15")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sotaseg", description="Road-aware anomaly segmentation toolkit.",
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a synthetic scene dataset")
    p.add_argument("--count", type=int, help="number of scenes (default: data.train_count)")
    p.add_argument("--start", type=int, default=0, help="first scene index")

    p = add("train-base", cmd_train_base, "train the closed-set base segmentor")
    p.add_argument("--data", help="dataset directory")

    p = add("train-sota", cmd_train_sota, "train fusion, prompt and decoder on a frozen base")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--base", help="base segmentor checkpoint")
    p.add_argument("--val", help="optional validation dataset directory")

    p = add("eval", cmd_eval, "evaluate a score source on a dataset")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--bundle", help="pipeline checkpoint")
    p.add_argument("--base", help="base checkpoint (raw mode without a bundle)")
    p.add_argument("--mode", choices=("pipeline", "raw", "decoder", "oracle"), default="pipeline")
    p.add_argument("--on-missing", choices=("raise", "skip"), default="raise")

    p = add("predict", cmd_predict, "write final maps and intermediates for images")
    p.add_argument("--input", required=True, help="PNG file, directory of PNGs, or dataset directory")
    p.add_argument("--bundle", help="pipeline checkpoint")

    p = add("viz", cmd_viz, "render heatmaps and panels from a predict directory")
    p.add_argument("--pred", required=True, help="output directory of the predict command")

    p = add("bench", cmd_bench, "time base-only against the full pipeline")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--bundle", help="pipeline checkpoint")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--limit", type=int, default=5, help="number of images to time")

    p = add("experiment", cmd_experiment, "directional run and ablations over several seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--no-ablations", action="store_true")
    return parser


def _fail(code: int, message: str) -> int:
    line = {"error": EXIT_CODES[code], "exit": code, "message": " ".join(str(message).split())}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = int(exc.code or 0)
        # argparse has already printed its usage text; keep the one-line contract too
        return _fail(EXIT_USAGE, "invalid command line") if code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SOTA_NUM_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            return _fail(EXIT_CONFIG, f"SOTA_NUM_THREADS must be an integer, got {threads!r}")
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_INPUT, str(exc))
    except (config_mod.ConfigError,) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except DimensionError as exc:
        return _fail(EXIT_DIMENSION, str(exc))
    except persist.FormatError as exc:
        return _fail(EXIT_FORMAT, str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:  # noqa: BLE001 - last resort keeps the one-line error contract
        return _fail(EXIT_UNEXPECTED, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
