"""``chsnet`` command-line entry point.

Every subcommand is driven by ``--config`` plus repeatable ``--set
section.key=value`` overrides. Failures exit nonzero and print one line,
``chsnet: error[<category>]: <message>``, to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, dump_config, load_config

EXIT_CODES = {"config": 2, "input": 3, "checkpoint": 4, "training": 5, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_gen(cfg: Config, args) -> int:
    from .noise import NoiseSpec
    from .synth import SceneSpec, build_dataset

    if args.seed is not None:
        cfg.scene.seed = cfg.noise.seed = args.seed
    root = Path(args.out or cfg.data.dataset)
    try:
        scene = SceneSpec(**{**cfg.scene.__dict__})
        noise = NoiseSpec(**cfg.noise.__dict__)
        build_dataset(scene, cfg.data.n_train, cfg.data.n_val, noise, root, overwrite=cfg.data.overwrite)
    except FileExistsError as exc:
        raise CliError("input", str(exc)) from None
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    print(f"wrote {cfg.data.n_train + cfg.data.n_val} images to {root}")
    return 0


def _load_data(cfg: Config):
    from .train import TrainData

    try:
        return TrainData.load(cfg.data.dataset, cfg.data.train_split)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError("input", str(exc)) from None


def cmd_train(cfg: Config, args) -> int:
    from .plotting import plot_training_curves
    from .train import TrainingDiverged, train

    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.deterministic:
        cfg.train.deterministic = True
    out = _out_dir(args, "runs/train")
    dump_config(cfg, out / "config.yaml")
    data = _load_data(cfg)
    try:
        result = train(cfg.model, cfg.train, data, out_dir=out, resume=args.resume)
    except TrainingDiverged as exc:
        raise CliError("training", str(exc)) from None
    plot_training_curves(result.history, out / "training_curves.png")
    last = result.history[-1] if result.history else {}
    print(json.dumps({"epochs": len(result.history), "val_mae": last.get("val_mae"),
                      "val_mse": last.get("val_mse"), "best_mae": result.best_mae}))
    return 0


def _checkpoint(path: str) -> str:
    if not path:
        raise CliError("config", "no checkpoint given (set eval.checkpoint / predict.checkpoint / plot.checkpoint)")
    if not Path(path).exists():
        raise CliError("input", f"checkpoint {path} not found")
    return path


def cmd_eval(cfg: Config, args) -> int:
    from .ablation import format_table, write_csv
    from .model import CheckpointError
    from .train import HEADS, evaluate

    ckpt = _checkpoint(cfg.eval.checkpoint)
    heads = HEADS if cfg.eval.head == "all" else (cfg.eval.head,)
    rows = []
    try:
        for head in heads:
            rows.append(evaluate(ckpt, cfg.data.dataset, head, cfg.eval.split, cfg.eval.batch_size))
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None
    except (FileNotFoundError, ValueError) as exc:
        raise CliError("input", str(exc)) from None
    out = _out_dir(args, "runs/eval")
    summary = [r.summary() for r in rows]
    fields = ["head", "mae", "mse", "easy_mae", "easy_mse", "hard_mae", "hard_mse"]
    write_csv(summary, fields, out / "eval.csv")
    (out / "eval.txt").write_text(format_table(summary, fields))
    with (out / "eval_counts.csv").open("w") as fh:
        fh.write("head,index,predicted,true\n")
        for r in rows:
            for i, (p, t) in enumerate(r.per_image_counts):
                fh.write(f"{r.head},{i},{p!r},{t!r}\n")
    print(format_table(summary, fields), end="")
    return 0


def cmd_predict(cfg: Config, args) -> int:
    from .model import CheckpointError, load_checkpoint
    from .synth import load_image
    from .train import predict_maps

    ckpt = _checkpoint(cfg.predict.checkpoint)
    image_path = Path(cfg.predict.image)
    if not image_path.is_file():
        raise CliError("input", f"image {image_path} not found")
    try:
        model, payload = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None
    scale = payload.get("train_config", {}).get("density_scale", 1.0)
    image = load_image(image_path)
    conv, tran = predict_maps(model, [image])[0]
    avg = 0.5 * (conv + tran)
    out = _out_dir(args, "runs/predict")
    stem = image_path.stem
    save_maps(out / f"{stem}_maps.npz", conv=conv / scale, tran=tran / scale, average=avg / scale)
    counts = {"image": str(image_path), "conv": float(conv.sum() / scale),
              "tran": float(tran.sum() / scale), "average": float(avg.sum() / scale)}
    (out / f"{stem}_counts.json").write_text(json.dumps(counts, indent=2) + "\n")
    print(json.dumps(counts))
    return 0


def save_maps(path: str | Path, **maps: np.ndarray) -> None:
    np.savez(path, **maps)


def load_maps(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def cmd_plot(cfg: Config, args) -> int:
    from .densitymap import generate_density_map
    from .model import CheckpointError, load_checkpoint
    from .plotting import plot_prediction_panels, plot_training_curves
    from .synth import load_split
    from .train import predict_maps

    out = _out_dir(args, "runs/plots")
    written = 0
    if cfg.plot.metrics:
        path = Path(cfg.plot.metrics)
        if not path.is_file():
            raise CliError("input", f"metrics log {path} not found")
        history = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        plot_training_curves(history, out / "training_curves.png")
        written += 1
    if cfg.plot.checkpoint:
        try:
            model, payload = load_checkpoint(_checkpoint(cfg.plot.checkpoint))
        except CheckpointError as exc:
            raise CliError("checkpoint", str(exc)) from None
        tc = payload.get("train_config", {})
        scale = tc.get("density_scale", 1.0)
        try:
            samples = load_split(cfg.data.dataset, cfg.plot.split)[: cfg.plot.n_images]
        except (FileNotFoundError, ValueError) as exc:
            raise CliError("input", str(exc)) from None
        maps = predict_maps(model, [img for img, _ in samples])
        stride = model.cfg.output_stride
        lines = ["image,gt,conv,tran,average"]
        for (img, rec), (conv, tran) in zip(samples, maps):
            gt = generate_density_map(rec.ann, tc.get("kernel_size", 15), tc.get("sigma", 4.0), stride).grid
            name = Path(rec.image).stem
            plot_prediction_panels(img, gt, conv / scale, tran / scale, out / f"{name}.png", title=rec.image)
            lines.append(f"{rec.image},{gt.sum():.4f},{conv.sum() / scale:.4f},{tran.sum() / scale:.4f},"
                         f"{0.5 * (conv + tran).sum() / scale:.4f}")
            written += 1
        (out / "counts.csv").write_text("\n".join(lines) + "\n")
    if not written:
        raise CliError("config", "nothing to plot: set plot.checkpoint and/or plot.metrics")
    print(f"wrote {written} figure(s) to {out}")
    return 0


def cmd_ablate(cfg: Config, args) -> int:
    from .ablation import format_table, run_ablation, sweep_seeds, write_report, SUMMARY_FIELDS

    if args.seed is not None:
        cfg.ablate.master_seed = args.seed
    if args.deterministic:
        cfg.train.deterministic = True
    for d in cfg.ablate.delta_max:
        if not 0.0 <= d <= 1.0:
            raise CliError("config", f"sweep value delta_max={d} outside [0, 1]")
    out = _out_dir(args, "runs/ablate")
    dump_config(cfg, out / "config.yaml")
    data = _load_data(cfg)
    seeds = sweep_seeds(cfg.ablate.master_seed, cfg.ablate.n_seeds)
    rows = run_ablation(cfg.model, cfg.train, data, cfg.ablate.delta_max, seeds, out, cfg.ablate.alpha_max)
    summary = write_report(rows, out)
    print(format_table(summary, SUMMARY_FIELDS), end="")
    return 0


COMMANDS = {
    "synth-gen": (cmd_synth_gen, "render a synthetic dataset with noisy training annotations"),
    "train": (cmd_train, "train the dual-head model"),
    "eval": (cmd_eval, "evaluate a checkpoint (MAE/MSE, easy/hard split)"),
    "predict": (cmd_predict, "predict density maps and counts for one image"),
    "plot": (cmd_plot, "render prediction panels and training curves to PNG"),
    "ablate": (cmd_ablate, "sweep delta_max over several seeds"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.max_epochs=5 (repeatable)")
    common.add_argument("--seed", type=int, help="seed for the subcommand's randomness")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="chsnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "train":
            p.add_argument("--resume", help="checkpoint to resume from")
    return parser



def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        handler = COMMANDS[args.command][0]
        return handler(cfg, args)
    except ConfigError as exc:
        category, message = "config", str(exc)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except Exception as exc:  # noqa: BLE001
        category, message = "internal", f"{type(exc).__name__}: {exc}"
    message = " ".join(message.split())
    print(f"chsnet: error[{category}]: {message}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
