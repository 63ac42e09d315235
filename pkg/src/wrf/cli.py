"""Experiment front end: train, sweep, landscape, selfcheck.

Configs are line-oriented ``key=value`` text so that a run's resolved
settings can be echoed back out byte-for-byte. Every run directory gets
a ``config.echo`` holding all settings plus a short hash; feeding that
file back in reproduces the run (the data, the init, and the step
streams are all derived from the recorded seed).

Exit codes: 0 success, 1 selfcheck failure, 2 config or IO error,
3 numeric abort, 4 sweep finished with some failed runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError, WrfError
from .evalkit import default_alpha_grid, flatness_score, landscape_probe, landscape_to_csv
from .checkpoint import load_checkpoint
from .loss import LossConfig
from .model import ModelConfig, RetrievalModel
from .perturb import PerturbConfig
from .selfcheck import run_selfcheck
from .synthcir import DatasetConfig, generate, subsample_dataset
from .trainer import RetrievalObjective, RunRecord, TrainConfig, TripletBatch, train

SWEEP_PARAMS = ("gamma", "rho", "fraction", "lora_rank")

SWEEP_HEADER = (
    "param,value,seed,best_val_rmean,final_val_rmean,gap_at_best,"
    "epoch_of_best,seconds_per_epoch"
)

# Landscape loss is evaluated on one big training batch, capped so the
# probe stays cheap at any dataset size.
LANDSCAPE_BATCH_CAP = 512


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat union of all component settings plus output plumbing.

    One seed drives dataset generation, model init, and the training
    streams; the per-module stream tags keep them independent.
    """

    run_name: str = "run"
    out_dir: str = "runs"
    seed: int = 0
    fraction: float = 1.0
    # data
    d_ref: int = 32
    d_mod: int = 8
    n_mods: int = 8
    n_train: int = 512
    n_val: int = 512
    gallery_size: int = 2048
    noise_sigma: float = 0.1
    subset_size: int = 6
    # model
    hidden: tuple = (64, 64)
    d_out: int = 16
    activation: str = "tanh"
    init_scale: float = 1.0
    # objective + perturbation + schedule
    tau: float = 10.0
    gamma: float = 1e-3
    rho: float = 1.0
    eta0: float = 1e-3
    schedule: str = "cosine"
    total_epochs: int = 60
    warmup_epochs: int = 3
    batch_size: int = 64
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    eval_every: int = 1
    checkpoint_every: int = 0
    finetune_mode: str = "full"
    lora_rank: int = 0

    def __post_init__(self):
        if not self.run_name or "/" in self.run_name:
            raise ConfigError(f"run_name must be a plain directory name, got {self.run_name!r}")
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        # Building every component config validates all their invariants.
        self.dataset_config()
        self.model_config()
        self.train_config()
        self.loss_config()
        self.perturb_config()

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            d_ref=self.d_ref, d_mod=self.d_mod, n_mods=self.n_mods,
            n_train=self.n_train, n_val=self.n_val, gallery_size=self.gallery_size,
            noise_sigma=self.noise_sigma, subset_size=self.subset_size, seed=self.seed,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_ref=self.d_ref, d_mod=self.d_mod, hidden=self.hidden, d_out=self.d_out,
            activation=self.activation, init_scale=self.init_scale, seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            gamma=self.gamma, rho=self.rho, eta0=self.eta0, schedule=self.schedule,
            total_epochs=self.total_epochs, warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size, optimizer=self.optimizer, beta1=self.beta1,
            beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay,
            tau=self.tau, eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every, seed=self.seed,
            finetune_mode=self.finetune_mode, lora_rank=self.lora_rank,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau)

    def perturb_config(self) -> PerturbConfig:
        return PerturbConfig(gamma=self.gamma, rho=self.rho, seed=self.seed)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, text: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    kind = _FIELD_TYPES[key]
    try:
        if key == "hidden":
            return tuple(int(tok) for tok in text.split(",") if tok.strip())
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    return text


def _format_value(key: str, value) -> str:
    if key == "hidden":
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_lines(lines, source: str = "<config>") -> dict:
    mapping = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value
    return mapping


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


def build_config(mapping: dict) -> ExperimentConfig:
    mapping = dict(mapping)
    mapping.pop("config_hash", None)  # echo files carry it; it is derived
    return ExperimentConfig(**{k: _parse_value(k, v) for k, v in mapping.items()})


def config_echo_text(config: ExperimentConfig) -> str:
    lines = [
        f"{f.name}={_format_value(f.name, getattr(config, f.name))}"
        for f in dataclasses.fields(ExperimentConfig)
    ]
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]
    return body + f"config_hash={digest}\n"


def config_hash(config: ExperimentConfig) -> str:
    return config_echo_text(config).rsplit("=", 1)[1].strip()


def load_config_echo(path: str | Path) -> ExperimentConfig:
    return build_config(read_config_file(path))


def apply_overrides(mapping: dict, overrides) -> dict:
    out = dict(mapping)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value
    return out


def build_dataset(config: ExperimentConfig):
    dataset = generate(config.dataset_config())
    if config.fraction < 1.0:
        dataset = subsample_dataset(dataset, config.fraction, seed=config.seed)
    return dataset


def run_experiment(config: ExperimentConfig) -> tuple[RunRecord, Path]:
    run_dir = Path(config.out_dir) / config.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = config_echo_text(config)
    (run_dir / "config.echo").write_text(echo, encoding="utf-8")
    dataset = build_dataset(config)
    record = train(
        config.train_config(), config.model_config(), dataset,
        out_dir=run_dir, config_hash=config_hash(config),
    )
    return record, run_dir


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_train(args) -> int:
    try:
        mapping = apply_overrides(read_config_file(args.config), args.set)
        config = build_config(mapping)
    except (ConfigError, DataError, OSError) as exc:
        return _fail(str(exc), 2)
    try:
        record, run_dir = run_experiment(config)
    except (ConfigError, DataError, OSError) as exc:
        return _fail(str(exc), 2)
    except NumericError as exc:
        return _fail(f"numeric abort: {exc}", 3)
    print(f"run dir: {run_dir}")
    print(
        f"best val rmean {record.best_val_rmean:.4f} at epoch {record.best_epoch}; "
        f"final {record.final_val_rmean:.4f}; gap at best {record.gap_at_best():.4f}"
    )
    return 0


def _parse_sweep_values(param: str, text: str) -> list:
    tokens = [tok.strip() for tok in text.split(",") if tok.strip()]
    if not tokens:
        raise ConfigError("sweep needs at least one value")
    if param == "lora_rank":
        return [int(tok) for tok in tokens]
    return [float(tok) for tok in tokens]


def _sweep_config(base: dict, param: str, value, seed: int) -> ExperimentConfig:
    mapping = dict(base)
    if param == "lora_rank":
        # rank 0 means ordinary full fine-tuning: the sweep's baseline row.
        mapping["finetune_mode"] = "lora" if value > 0 else "full"
        mapping["lora_rank"] = str(value)
    else:
        mapping[param] = repr(value)
    mapping["seed"] = str(seed)
    mapping["run_name"] = f"{param}_{value!r}_seed{seed}"
    return build_config(mapping)


def cmd_sweep(args) -> int:
    try:
        base = apply_overrides(read_config_file(args.config), args.set)
        values = sorted(set(_parse_sweep_values(args.param, args.values)))
        seeds = sorted({int(tok) for tok in args.seeds.split(",") if tok.strip()})
        if not seeds:
            raise ConfigError("sweep needs at least one seed")
        planned = [
            (value, seed, _sweep_config(base, args.param, value, seed))
            for value in values
            for seed in seeds
        ]
    except (ConfigError, DataError, OSError) as exc:
        return _fail(str(exc), 2)

    rows = []
    failures = 0
    out_root = Path(planned[0][2].out_dir)
    for value, seed, config in planned:
        try:
            record, run_dir = run_experiment(config)
        except (WrfError, OSError) as exc:
            failures += 1
            print(f"error: run {config.run_name} failed: {exc}", file=sys.stderr)
            continue
        warm = config.warmup_epochs
        rows.append(
            f"{args.param},{_format_value(args.param, value)},{seed},"
            f"{record.best_val_rmean!r},{record.final_val_rmean!r},"
            f"{record.gap_at_best()!r},{record.best_epoch},"
            f"{record.seconds_per_epoch(skip_warmup=warm)!r}"
        )
        print(f"{config.run_name}: best val rmean {record.best_val_rmean:.4f}")
    out_root.mkdir(parents=True, exist_ok=True)
    summary = out_root / "sweep_summary.csv"
    summary.write_text("\n".join([SWEEP_HEADER, *rows]) + "\n", encoding="utf-8")
    print(f"summary: {summary} ({len(rows)} rows, {failures} failed)")
    return 4 if failures else 0


def cmd_landscape(args) -> int:
    try:
        ckpt_path = Path(args.checkpoint)
        run_dir = ckpt_path.parent
        config = load_config_echo(run_dir / "config.echo")
        model = RetrievalModel(
            config.model_config(),
            mode=config.finetune_mode,
            lora_rank=config.lora_rank if config.finetune_mode == "lora" else None,
        )
        trainable = model.init_params().trainable_names
        params = load_checkpoint(ckpt_path, trainable=trainable)
        dataset = build_dataset(config)
    except (ConfigError, DataError, OSError) as exc:
        return _fail(str(exc), 2)

    table = dataset.train
    n = min(len(table), LANDSCAPE_BATCH_CAP)
    batch = TripletBatch(
        refs=table.refs[:n],
        mods=dataset.mod_embeddings[table.mod_codes[:n]],
        targets=dataset.gallery[table.target_indices[:n]],
    )
    objective = RetrievalObjective(model, tau=config.tau)

    def loss_fn(ps):
        return objective.loss(ps, batch)

    try:
        alphas = default_alpha_grid(args.alpha_max, args.alpha_steps)
        curves = landscape_probe(loss_fn, params, args.directions, alphas, seed=config.seed)
    except (ConfigError, DataError) as exc:
        return _fail(str(exc), 2)
    except NumericError as exc:
        return _fail(f"numeric abort: {exc}", 3)
    out = Path(args.out) if args.out else run_dir / "landscape.csv"
    landscape_to_csv(curves, out)
    print(f"landscape: {out} ({len(curves)} directions x {len(alphas)} alphas)")
    try:
        print(f"flatness at alpha=0.05: {flatness_score(curves, 0.05):.6f}")
    except ConfigError:
        pass  # 0.05 not on the requested grid
    return 0


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(inject=args.inject)
    width = max(len(r.name) for r in results)
    for r in results:
        mark = "ok" if r.ok else "FAIL"
        print(f"[{mark:>4}] {r.name:<{width}}  {r.detail}")
    bad = [r.name for r in results if not r.ok]
    if bad:
        print(f"selfcheck failed: {', '.join(bad)}", file=sys.stderr)
        return 1
    print("selfcheck passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wrf", description="Weight-perturbed retrieval experiments."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="key=value config file")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override a config entry (repeatable)",
    )

    p_train = sub.add_parser("train", parents=[common], help="run one training job")
    p_train.set_defaults(fn=cmd_train)

    p_sweep = sub.add_parser("sweep", parents=[common], help="run one job per value x seed")
    p_sweep.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_land = sub.add_parser("landscape", help="probe the loss surface around a checkpoint")
    p_land.add_argument("--checkpoint", required=True, help="path inside a run directory")
    p_land.add_argument("--directions", type=int, default=10)
    p_land.add_argument("--alpha-max", type=float, default=0.1)
    p_land.add_argument("--alpha-steps", type=int, default=10,
                        help="steps per side; the grid has 2*steps+1 points")
    p_land.add_argument("--out", default=None, help="CSV path (default: <run dir>/landscape.csv)")
    p_land.set_defaults(fn=cmd_landscape)

    p_check = sub.add_parser("selfcheck", help="run the release-gate checks")
    p_check.add_argument("--inject", choices=["grad-sign"], default=None,
                         help="deliberately break a backward rule (testing the gate)")
    p_check.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
