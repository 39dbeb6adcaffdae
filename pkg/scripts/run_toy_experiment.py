"""End-to-end toy experiment: generate data, train jointly, evaluate, inspect.

Everything is driven through the dfinet command-line entry points so the run
is reproducible from the shell with the exact same arguments. Outputs land
under --output-dir (default runs/toy):

    config.json, epoch_*.ckpt, train_log.csv   training artifacts
    metrics_<task>.{csv,json}, curve_<task>.csv  evaluation reports
    selection_mean_<task>.csv, selection_keep_<task>.csv  stage-choice grids
"""

import argparse
from pathlib import Path

from dfinet.backbone import BackboneConfig
from dfinet.cli import main as dfinet
from dfinet.config import DataConfig, RunConfig, save_config
from dfinet.data import SyntheticSpec
from dfinet.dfim import DfimConfig
from dfinet.model import ModelConfig
from dfinet.tam import TamConfig
from dfinet.tasks import TASKS


def toy_config(args) -> RunConfig:
    cfg = RunConfig(
        model=ModelConfig(
            backbone=BackboneConfig(stage_channels=[4, 8, 8, 16, 16], ppm_channels=16),
            dfim=DfimConfig(common_channels=8, variant=args.variant, tasks=TASKS),
            tam=TamConfig(channels=8, mode=args.attention),
            rates=[2, 4, 8, 16],
            tasks=TASKS,
        ),
        data=DataConfig(synthetic=SyntheticSpec(
            count=args.count, height=args.size, width=args.size, seed=args.data_seed)),
        output_dir=str(args.output_dir),
    )
    cfg.train.epochs = args.epochs
    cfg.train.lr_drop_epoch = max(1, args.epochs - 1)
    cfg.train.learning_rate = args.learning_rate
    cfg.train.seed = args.seed
    return cfg.validate()


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output-dir", type=Path, default=Path("runs/toy"))
    parser.add_argument("--count", type=int, default=24, help="synthetic images")
    parser.add_argument("--size", type=int, default=64, help="canvas side in px")
    parser.add_argument("--epochs", type=int, default=4)
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=0, help="training seed")
    parser.add_argument("--data-seed", type=int, default=1)
    parser.add_argument("--variant", default="sparse",
                        choices=("sparse", "dense", "identity"))
    parser.add_argument("--attention", default="shared",
                        choices=("shared", "unshared", "off"))
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "experiment.json"
    save_config(toy_config(args), config_path)

    steps = [
        ["train", "--config", str(config_path)],
        ["eval", "--checkpoint", str(out / f"epoch_{args.epochs - 1:03d}.ckpt"),
         "--output-dir", str(out)],
    ]
    if args.variant != "identity":
        steps.append(["inspect-selection",
                      "--checkpoint", str(out / f"epoch_{args.epochs - 1:03d}.ckpt"),
                      "--output-dir", str(out)])
    for argv in steps:
        print("+ dfinet", " ".join(argv))
        code = dfinet(argv)
        if code != 0:
            return code
    print(f"done; artifacts in {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
