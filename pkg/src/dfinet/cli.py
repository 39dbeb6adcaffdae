"""Command-line entry point.

Subcommands: train, eval, predict, inspect-selection, inspect-attention,
gen-synthetic. Every run is driven by a JSON config (defaults apply when no
--config is given) with flags overriding individual fields; the effective
config is echoed into the output directory. Exit codes: 0 success, 2 usage
or configuration error, 3 runtime failure.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch

from dfinet import config as config_mod
from dfinet.data import (Sample, export_samples, generate_synthetic, image_tensor,
                         load_prediction, save_prediction)
from dfinet.errors import ConfigError
from dfinet.metrics import evaluate_dataset, write_report
from dfinet.model import build_model, load_checkpoint, load_model_state
from dfinet.tasks import TASKS, check_tasks
from dfinet.trainer import normalize_image, predict_samples, run as train_run


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="JSON run configuration")
    sub.add_argument("--seed", type=int, help="override the run seed")
    sub.add_argument("--output-dir", help="override output_dir")
    sub.add_argument("--tasks", help="comma-separated subset of saliency,edge,skeleton")


def _parse_tasks(arg: str | None):
    if arg is None:
        return None
    return check_tasks(tuple(t.strip() for t in arg.split(",") if t.strip()))


def _effective_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.output_dir:
        cfg.output_dir = args.output_dir
    tasks = _parse_tasks(args.tasks)
    if tasks is not None:
        cfg.model.tasks = tasks
    return cfg.validate()


def _model_from_checkpoint(path):
    """Rebuild the architecture from the checkpoint's config echo."""
    if not path:
        raise ConfigError("--checkpoint is required for this subcommand")
    ckpt = load_checkpoint(path)
    echo = ckpt.meta.get("config")
    if not echo:
        raise ConfigError(f"{path}: checkpoint carries no config echo")
    run_cfg = config_mod.run_config_from_dict(echo)
    model = build_model(run_cfg.model)
    load_model_state(model, ckpt)
    model.eval()
    return model, run_cfg


def _eval_tasks(args, model_tasks):
    tasks = _parse_tasks(args.tasks) or model_tasks
    for task in tasks:
        if task not in model_tasks:
            raise ConfigError(f"task {task!r} is not enabled in this checkpoint")
    return tasks


# --- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model)
    datasets = config_mod.load_datasets(cfg.data, cfg.model.tasks)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out / "config.json")
    state = train_run(model, cfg.train, datasets, out,
                      config_echo=config_mod.to_dict(cfg),
                      loss_config=cfg.loss,
                      resume_from=args.checkpoint)
    losses = " ".join(f"{t}={v:.4e}" for t, v in state.running_loss.items())
    print(f"trained {state.epoch + 1} epochs, {state.step} steps; last-epoch mean loss {losses}")
    print(f"checkpoint: {state.checkpoint_path}")
    return 0


def _dataset_label(cfg: config_mod.RunConfig, task: str) -> str:
    if task in cfg.data.paths:
        return Path(cfg.data.paths[task]).name or "dataset"
    return "synthetic"


def cmd_eval(args) -> int:
    if args.predictions:
        cfg = _effective_config(args)
        tasks = _parse_tasks(args.tasks) or cfg.model.tasks
        model = None
    else:
        model, cfg = _model_from_checkpoint(args.checkpoint)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        tasks = _eval_tasks(args, cfg.model.tasks)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = config_mod.load_datasets(cfg.data, tasks)
    for task in tasks:
        samples = datasets[task]
        gts = [s.targets[task][0] for s in samples]
        if args.predictions:
            pred_dir = Path(args.predictions)
            preds = []
            for s in samples:
                path = pred_dir / f"{s.name}_{task}.png"
                if not path.is_file():
                    raise FileNotFoundError(f"{path}: missing prediction map")
                preds.append(load_prediction(path))
        else:
            preds = predict_samples(model, samples, task, cfg.train)
        report = evaluate_dataset(
            preds, gts, task,
            tol=cfg.metrics.tolerance(),
            saliency_thresholds=cfg.metrics.saliency_thresholds(),
            boundary_thresholds=cfg.metrics.boundary_thresholds(),
        )
        write_report(report, out, dataset=_dataset_label(cfg, task))
        values = " ".join(f"{k}={v:.4f}" for k, v in sorted(report.values.items()))
        print(f"{task}: {values}")
    return 0


def _load_image_file(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0).transpose(2, 0, 1)


def cmd_predict(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    tasks = _eval_tasks(args, cfg.model.tasks)
    src = Path(args.input)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not paths:
            raise FileNotFoundError(f"{src}: no images found")
    elif src.is_file():
        paths = [src]
    else:
        raise FileNotFoundError(f"{src}: no such file or directory")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for path in paths:
            image = torch.from_numpy(_load_image_file(path)).unsqueeze(0)
            image = normalize_image(image, cfg.train)
            for task in tasks:
                prob = model.predict(image, task)[0, 0].numpy()
                save_prediction(out / f"{path.stem}_{task}.png", prob)
    print(f"wrote {len(paths) * len(tasks)} maps to {out}")
    return 0


def _selection_stats(model, samples: list[Sample], train_cfg):
    """Mean selection probabilities and keep frequencies over a sample set.

    Returns (rates, {task: (R, M) mean probs}, {task: (R, M) keep freq}).
    """
    rates = list(model.config.rates)
    tasks = model.config.tasks
    prob_sum = {}
    keep_sum = {}
    seen = 0
    model.eval()
    with torch.no_grad():
        for sample in samples:
            image = normalize_image(image_tensor(sample), train_cfg)
            _, profiles = model.forward_all(image)
            if not profiles:
                raise ConfigError(
                    "identity-variant checkpoints have no selection profiles to inspect"
                )
            for key, profile in profiles.items():
                prob_sum[key] = prob_sum.get(key, 0.0) + profile.probabilities.sum(0).numpy()
                keep_sum[key] = keep_sum.get(key, 0.0) + \
                    profile.kept_mask.to(torch.float64).sum(0).numpy()
            seen += 1
    mean = {}
    keep = {}
    for task in tasks:
        mean[task] = np.stack([prob_sum[(r, task)] / seen for r in rates])
        keep[task] = np.stack([keep_sum[(r, task)] / seen for r in rates])
    return rates, mean, keep


def _write_grid(path, rates, grid: np.ndarray):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rate"] + [f"stage_{i + 1}" for i in range(grid.shape[1])])
        for rate, row in zip(rates, grid):
            writer.writerow([rate] + [f"{v:.8f}" for v in row])


def cmd_inspect_selection(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    tasks = _eval_tasks(args, cfg.model.tasks)
    datasets = config_mod.load_datasets(cfg.data, tasks)
    samples = datasets[tasks[0]]
    rates, mean, keep = _selection_stats(model, samples, cfg.train)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for task in tasks:
        _write_grid(out / f"selection_mean_{task}.csv", rates, mean[task])
        _write_grid(out / f"selection_keep_{task}.csv", rates, keep[task])
        print(f"{task}: wrote {mean[task].shape[0]}x{mean[task].shape[1]} selection grids")
    return 0


def cmd_inspect_attention(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    tasks = _eval_tasks(args, cfg.model.tasks)
    datasets = config_mod.load_datasets(cfg.data, tasks)
    samples = datasets[tasks[0]]
    index = args.index
    if not 0 <= index < len(samples):
        raise ConfigError(f"--index {index} out of range for {len(samples)} samples")
    sample = samples[index]
    image = normalize_image(image_tensor(sample), cfg.train)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        _, _, attention = model.forward_all(image, collect_attention=True)
    if not attention:
        raise ConfigError("this checkpoint's attention mode is 'off'; nothing to inspect")
    for (rate, task), gate in attention.items():
        if task not in tasks:
            continue
        save_prediction(out / f"attention_{task}_r{rate}_{sample.name}.png",
                        gate[0, 0].numpy())
    print(f"wrote attention maps for sample {sample.name} to {out}")
    return 0


def cmd_gen_synthetic(args) -> int:
    cfg = _effective_config(args)
    if cfg.data.synthetic is None:
        raise ConfigError("gen-synthetic needs a data.synthetic section in the config")
    spec = cfg.data.synthetic
    if args.seed is not None:
        spec.seed = args.seed
    if args.count is not None:
        spec.count = args.count
    tasks = _parse_tasks(args.tasks)
    if tasks is not None:
        spec.tasks = tasks
    samples = generate_synthetic(spec)
    out = Path(cfg.output_dir)
    export_samples(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfinet",
        description="Joint saliency/edge/skeleton prediction at toy scale",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model, checkpointing per epoch")
    _add_common(p)
    p.add_argument("--checkpoint", help="resume from this epoch checkpoint")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint or a prediction directory")
    _add_common(p)
    p.add_argument("--checkpoint", help="model checkpoint to evaluate")
    p.add_argument("--predictions", help="directory of <name>_<task>.png maps")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("predict", help="write per-task probability maps for images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.set_defaults(func=cmd_predict)

    p = subs.add_parser("inspect-selection",
                        help="dump mean selection-probability and keep-frequency grids")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect_selection)

    p = subs.add_parser("inspect-attention", help="dump attention maps for one sample")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="sample index to visualize")
    p.set_defaults(func=cmd_inspect_attention)

    p = subs.add_parser("gen-synthetic", help="export a synthetic dataset to disk")
    _add_common(p)
    p.add_argument("--count", type=int, help="override sample count")
    p.set_defaults(func=cmd_gen_synthetic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
