"""Command-line front end: ``generate``, ``train``, ``ablate``, ``eval``.

Options come from a flat key=value config file plus command-line overrides
(flags win over the file, the file wins over defaults). Unknown config keys
are a hard error. Exit codes: 0 success, 1 validation error, 2
runtime/numeric error. Artifact writers are atomic, so re-runs with the
same seed reproduce outputs byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import data as D
from . import evaluation as E
from . import model as M
from . import training as TR
from . import energy_mask as em
from . import tensor as T
from ._fileio import atomic_write_text, fmt_float

__all__ = ["RunConfig", "ConfigError", "load_config_file", "build_config", "main"]


class ConfigError(ValueError):
    """Invalid configuration (bad key, bad value, inconsistent options)."""


def _parse_int_list(text: str):
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    return tuple(int(t) for t in items)


def _parse_str_list(text: str):
    if isinstance(text, (tuple, list)):
        return tuple(str(v) for v in text)
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    return tuple(items)


def _parse_float_list(text: str):
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    return tuple(float(t) for t in items)


@dataclass
class RunConfig:
    """Union of generation, model, training, and evaluation options."""

    # data generation
    n_samples: int = 4000
    classes: int = 4
    image_size: int = 32
    channels: int = 1
    object_size: int = 8
    background: str = "constant"
    noise: float = 0.05
    # model
    conv_channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    patch_size: int = 1
    variant: str = "full"
    # training
    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 3e-3
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    lambda_unary: float = 1e-3
    lambda_pair: float = 1e-3
    eval_interval: int = 1
    train_fraction: float = 0.8
    freeze: tuple = ()
    # evaluation
    deletion_seeds: tuple = (0, 1, 2, 3, 4)
    keep_fraction: float = 0.3
    masks_out: int = 0
    # shared
    seed: int = 0

    def validate(self) -> "RunConfig":
        try:
            self.generator_config()
            self.model_config()
            self.train_config()
        except (ValueError, T.ShapeError) as err:
            raise ConfigError(str(err)) from err
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.masks_out < 0:
            raise ConfigError("masks_out must be >= 0")
        if not self.deletion_seeds:
            raise ConfigError("deletion_seeds must not be empty")
        return self

    def generator_config(self) -> D.GeneratorConfig:
        return D.GeneratorConfig(
            num_classes=self.classes,
            image_size=self.image_size,
            channels=self.channels,
            object_size=self.object_size,
            background=self.background,
            noise=self.noise,
            seed=self.seed,
        )

    def model_config(self, variant: str | None = None) -> M.ModelConfig:
        blocks = tuple(
            M.ConvBlock(out_channels=c, kernel=self.kernel_size, stride=1,
                        pad=self.kernel_size // 2, relu=True, pool=2)
            for c in self.conv_channels
        )
        return M.ModelConfig(
            input_shape=(self.channels, self.image_size, self.image_size),
            blocks=blocks,
            num_classes=self.classes,
            patch_size=self.patch_size,
            variant=variant if variant is not None else self.variant,
            lambda_unary=self.lambda_unary,
            lambda_pair=self.lambda_pair,
        )

    def train_config(self) -> TR.TrainConfig:
        return TR.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            peak_lr=self.peak_lr,
            min_lr=self.min_lr,
            weight_decay=self.weight_decay,
            lambda_unary=self.lambda_unary,
            lambda_pair=self.lambda_pair,
            seed=self.seed,
            frozen_groups=self.freeze,
            eval_interval=self.eval_interval,
        )


_FIELD_PARSERS = {
    "n_samples": int,
    "classes": int,
    "image_size": int,
    "channels": int,
    "object_size": int,
    "background": str,
    "noise": float,
    "conv_channels": _parse_int_list,
    "kernel_size": int,
    "patch_size": int,
    "variant": str,
    "epochs": int,
    "batch_size": int,
    "peak_lr": float,
    "min_lr": float,
    "weight_decay": float,
    "lambda_unary": float,
    "lambda_pair": float,
    "eval_interval": int,
    "train_fraction": float,
    "freeze": _parse_str_list,
    "deletion_seeds": _parse_int_list,
    "keep_fraction": float,
    "masks_out": int,
    "seed": int,
}

assert set(_FIELD_PARSERS) == {f.name for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    """Parse a flat ``key = value`` file. Comments start with ``#``; unknown
    or duplicate keys are hard errors."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        try:
            values[key] = _FIELD_PARSERS[key](value)
        except ValueError as err:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {err}") from err
    return values


def build_config(config_path, overrides: dict) -> RunConfig:
    """Defaults, then config file, then CLI overrides; validated."""
    values = load_config_file(config_path) if config_path else {}
    for key, value in overrides.items():
        if value is None:
            continue
        values[key] = _FIELD_PARSERS[key](value)
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# commands


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _split_dataset(cfg: RunConfig, dataset):
    return D.split(dataset, (cfg.train_fraction, 1.0 - cfg.train_fraction), seed=cfg.seed)


def cmd_generate(args) -> int:
    cfg = build_config(args.config, _overrides(args, (
        "seed", "n_samples", "classes", "image_size", "channels",
        "object_size", "background", "noise",
    )))
    dataset = D.generate(cfg.generator_config(), cfg.n_samples)
    D.write_dataset(dataset, args.out)
    c, h, w = dataset.sample_shape
    print(f"wrote {args.out}: n={len(dataset)} classes={dataset.num_classes} "
          f"shape={c}x{h}x{w} seed={cfg.seed}")
    return 0


def _run_training(cfg: RunConfig, data_path, init_path=None):
    dataset = D.read_dataset(data_path)
    train_set, test_set = _split_dataset(cfg, dataset)
    model_cfg = cfg.model_config()
    params = M.load_params(init_path, model_cfg) if init_path else M.init_params(model_cfg, seed=cfg.seed)
    model = M.Model(model_cfg, params)
    result = TR.train(model, train_set, test_set, cfg.train_config())
    return model_cfg, result


def cmd_train(args) -> int:
    cfg = build_config(args.config, _overrides(args, (
        "seed", "variant", "epochs", "batch_size", "peak_lr", "min_lr",
        "weight_decay", "lambda_unary", "lambda_pair", "eval_interval",
        "train_fraction", "freeze", "patch_size", "conv_channels",
    )))
    if args.init and not Path(args.init).is_file():
        raise ConfigError(f"init checkpoint not found: {args.init}")
    if not Path(args.data).is_file():
        raise ConfigError(f"dataset not found: {args.data}")
    out_dir = Path(args.out)
    _, result = _run_training(cfg, args.data, init_path=args.init)
    out_dir.mkdir(parents=True, exist_ok=True)
    TR.write_metrics_csv(result.metrics, out_dir / "metrics.csv")
    M.save_params(result.best_params, out_dir / "model_best.ersm")
    M.save_params(result.params, out_dir / "model_final.ersm")
    final = result.metrics[-1]
    print(f"peak_test_acc={fmt_float(result.best_test_acc)} "
          f"(epoch {result.best_epoch}) final_mean_mask={fmt_float(final.mean_mask)}")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args.config, _overrides(args, (
        "seed", "epochs", "batch_size", "peak_lr", "min_lr", "weight_decay",
        "eval_interval", "train_fraction", "patch_size", "conv_channels",
    )))
    lu_values = _parse_float_list(args.lambda_unary_grid)
    lp_values = _parse_float_list(args.lambda_pair_grid)
    if not lu_values or not lp_values:
        raise ConfigError("lambda grids must be non-empty comma-separated lists")
    if not Path(args.data).is_file():
        raise ConfigError(f"dataset not found: {args.data}")
    dataset = D.read_dataset(args.data)
    train_set, test_set = _split_dataset(cfg, dataset)
    cells = TR.grid_search(cfg.model_config(variant="full"), train_set, test_set,
                           lu_values, lp_values, cfg.train_config())
    lines = ["lambda_unary,lambda_pair,accuracy,mean_mask,error"]
    for c in cells:
        err = c.error.replace(",", ";") if c.error else ""
        lines.append(f"{fmt_float(c.lambda_unary)},{fmt_float(c.lambda_pair)},"
                     f"{fmt_float(c.accuracy)},{fmt_float(c.mean_mask)},{err}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "ablation.csv", "\n".join(lines) + "\n")
    best = TR.best_cell(cells)
    print(f"best cell: lambda_unary={fmt_float(best.lambda_unary)} "
          f"lambda_pair={fmt_float(best.lambda_pair)} accuracy={fmt_float(best.accuracy)} "
          f"mean_mask={fmt_float(best.mean_mask)}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args.config, _overrides(args, (
        "seed", "variant", "train_fraction", "keep_fraction", "deletion_seeds",
        "masks_out", "patch_size", "conv_channels",
    )))
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.data).is_file():
        raise ConfigError(f"dataset not found: {args.data}")
    model_cfg = cfg.model_config()
    model = M.Model.load(model_cfg, args.checkpoint)
    dataset = D.read_dataset(args.data)
    _, test_set = _split_dataset(cfg, dataset)
    energy = E.deletion_curve(model, test_set, "energy")
    random = E.deletion_curve(model, test_set, "random", seeds=cfg.deletion_seeds)
    sparsity = E.sparsity_report(model, test_set)
    alignment = E.alignment_report(model, test_set, cfg.keep_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_curves_csv([energy, random], out / "robustness.csv")
    E.write_sparsity_csv(sparsity, out / "sparsity.csv")
    E.write_alignment_csv(alignment, out / "alignment.csv")
    if cfg.masks_out > 0:
        geom = model_cfg.token_geometry()
        mask_dir = out / "masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(test_set):
            if i >= cfg.masks_out:
                break
            _, diag = model.predict(s.image, mode="infer")
            em.export_mask_pgm(diag.m, geom, mask_dir / f"mask_{i:04d}.pgm",
                               out_hw=model_cfg.input_shape[1:])
    gap = E.mean_accuracy_gap(energy, random)
    print(f"energy_vs_random_gap={fmt_float(gap)} "
          f"mean_mask={fmt_float(sparsity.mean_mask)} "
          f"alignment={fmt_float(alignment.mean_overlap)} "
          f"alignment_baseline={fmt_float(alignment.baseline_mean)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p, names):
    flag_for = lambda n: "--" + n.replace("_", "-")
    for name in names:
        p.add_argument(flag_for(name), dest=name, default=None, metavar="V",
                       help=f"override config key {name} (default {getattr(RunConfig(), name)!r})")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ersm",
        description="Energy-regularized spatial masking: data generation, training, "
                    "ablation, and robustness evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic ERSD dataset")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True, help="output dataset path")
    _add_config_flags(p, ("seed", "n_samples", "classes", "image_size", "channels",
                          "object_size", "background", "noise"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write metrics + checkpoints")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True, help="ERSD dataset path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    _add_config_flags(p, ("seed", "variant", "epochs", "batch_size", "peak_lr", "min_lr",
                          "weight_decay", "lambda_unary", "lambda_pair", "eval_interval",
                          "train_fraction", "freeze", "patch_size", "conv_channels"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="grid search over the energy weights")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True, help="ERSD dataset path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lambda-unary-grid", required=True,
                   help="comma-separated lambda_unary values")
    p.add_argument("--lambda-pair-grid", required=True,
                   help="comma-separated lambda_pair values")
    _add_config_flags(p, ("seed", "epochs", "batch_size", "peak_lr", "min_lr",
                          "weight_decay", "eval_interval", "train_fraction",
                          "patch_size", "conv_channels"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="robustness curves, sparsity, alignment, masks")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--checkpoint", required=True, help="ERSM checkpoint path")
    p.add_argument("--data", required=True, help="ERSD dataset path")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, ("seed", "variant", "train_fraction", "keep_fraction",
                          "deletion_seeds", "masks_out", "patch_size", "conv_channels"))
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0; bad usage is a validation failure
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, D.DatasetFormatError, M.CheckpointFormatError,
            FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TR.TrainingDivergedError, T.NonFiniteError, ArithmeticError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
