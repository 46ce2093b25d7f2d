"""``hetsolver`` command line: generate, train, eval, rollout, ablate, plot."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import errormap
from .datagen import PHYSICS_FIELDS, Layout, ScenarioSampler, load_dataset, make_dataset
from .errors import ConfigError, HetSolverError, IoError
from .model import ABLATION_NAMES, Ablation, load_checkpoint
from .trainer import (VARIANTS, TrainConfig, ablation_suite, collect_samples,
                      evaluate, parse_loss, rollout, train)

PRESETS = Path(__file__).parent / "presets"
SEED_ENV = "HETSOLVER_SEED"
GENERATE_KEYS = ("n_traj", "layout", "seed", "frames", "n_fluid", "n_solid", "fluid_spacing",
                 "stride", "warmup_time")
SECTIONS = {
    "train": tuple(f.name for f in dataclasses.fields(TrainConfig)),
    "generate": GENERATE_KEYS,
    "physics": PHYSICS_FIELDS,
}


# ---------------------------------------------------------------- config files


def resolve_config(value: str | None) -> Path | None:
    """A path, or the name of a bundled preset such as ``micro``."""
    if value is None:
        return None
    path = Path(value)
    if path.exists():
        return path
    preset = PRESETS / f"{value}.ini"
    if preset.exists():
        return preset
    raise ConfigError(f"config file {value!r} not found")


def resolve_data(value: str) -> Path:
    if value.startswith("@"):
        path = PRESETS / f"{value[1:]}_data"
        if not path.is_dir():
            raise IoError(f"no bundled dataset named {value[1:]!r}")
        return path
    return Path(value)


def read_config(path: Path | None) -> dict[str, dict[str, str]]:
    """Sectioned ``key = value`` file; unknown sections or keys are an error."""
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        unknown = set(parser[section]) - set(SECTIONS[section])
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
        out[section] = dict(parser[section])
    return out


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) == 1:
                parts = parts * 2
            if len(parts) != 2:
                raise ValueError(raw)
            return tuple(type(like[0])(p) for p in parts)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {raw!r}") from err
    return raw


def train_config(sections: dict, overrides: dict) -> TrainConfig:
    base = TrainConfig()
    values = {}
    for key, raw in sections.get("train", {}).items():
        if key == "ablation":
            values[key] = _ablation(raw)
        else:
            values[key] = _coerce(raw, getattr(base, key), f"train.{key}")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        values["seed"] = _coerce(env_seed, 0, SEED_ENV)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return dataclasses.replace(base, **values)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def scenario_sampler(sections: dict, layout: str | None) -> tuple[ScenarioSampler, dict]:
    base = ScenarioSampler()
    gen = dict(sections.get("generate", {}))
    extra = {k: gen.pop(k) for k in ("n_traj", "seed", "layout") if k in gen}
    values = {k: _coerce(v, getattr(base, k), f"generate.{k}") for k, v in gen.items()}
    if layout or "layout" in extra:
        try:
            values["layout"] = Layout(layout or extra["layout"])
        except ValueError as err:
            raise ConfigError(f"unknown layout {layout or extra['layout']!r}") from err
    physics = dict(base.physics)
    for key, raw in sections.get("physics", {}).items():
        physics[key] = _coerce(raw, (0.0, 0.0), f"physics.{key}")
    values["physics"] = physics
    return dataclasses.replace(base, **values), extra


def _ablation(name: str) -> Ablation:
    try:
        return Ablation.named(name)
    except ValueError as err:
        raise ConfigError(str(err)) from err


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    sections = read_config(resolve_config(args.config))
    sampler, extra = scenario_sampler(sections, args.layout)
    n_traj = args.n_traj if args.n_traj is not None else int(extra.get("n_traj", 40))
    seed = args.seed
    if seed is None:
        env = os.environ.get(SEED_ENV)
        seed = int(env) if env is not None else int(extra.get("seed", 0))
    manifest = make_dataset(n_traj, sampler, args.out, seed=seed)
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    nodes = [t["nodes"] for t in manifest["trajectories"]]
    print(f"wrote {n_traj} trajectories to {args.out} (layout={manifest['layout']}, seed={seed})")
    print(f"splits train={sizes['train']} val={sizes['val']} test={sizes['test']}; "
          f"nodes {min(nodes)}..{max(nodes)}; frames {manifest['trajectories'][0]['frames']}")
    return 0


def cmd_train(args) -> int:
    sections = read_config(resolve_config(args.config))
    overrides = dict(epochs=args.epochs, seed=args.seed, loss=args.loss,
                     ablation=_ablation(args.ablation) if args.ablation else None)
    if args.loss:
        parse_loss(args.loss)
    config = train_config(sections, overrides)
    dataset = load_dataset(resolve_data(args.data))
    result = train(dataset, config, args.out)
    last = [row for row in result.history if row["epoch"] == config.epochs]
    for row in last:
        print(f"epoch {row['epoch']} {row['split']}: l_fluid={row['l_fluid']:.6g} "
              f"l_solid={row['l_solid']:.6g} rel_l2_combined={row['rel_l2_combined']:.4g}%")
    print(f"checkpoints: {result.checkpoint} {result.best_checkpoint}")
    return 0


EVAL_COLUMNS = ("predictor", "split", "l_fluid", "l_solid", "rel_l2_fluid", "rel_l2_solid",
                "rel_l2_combined")


def _write_csv(path, columns, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err
    finally:
        if path:
            fh.close()


def cmd_eval(args) -> int:
    params, ablation = load_checkpoint(args.ckpt)
    dataset = load_dataset(resolve_data(args.data))
    norm = dataset.normalizer
    samples = collect_samples(dataset.split(args.split), params.config.window, norm)
    rows = []
    for name, persistence in (("model", False), ("persistence", True)):
        ev = evaluate(params, samples, norm, ablation, persistence=persistence)
        rows.append((name, args.split, ev.l_fluid, ev.l_solid, ev.rel_fluid, ev.rel_solid,
                     ev.rel_combined))
    _write_csv(args.out, EVAL_COLUMNS, rows)
    return 0


ROLLOUT_COLUMNS = ("predictor", "traj", "step", "rel_l2_fluid", "rel_l2_solid", "rel_l2_combined")


def _trajectory_ids(dataset, split: str, traj: int | None) -> list[int]:
    ids = dataset.manifest["splits"][split] if traj is None else [traj]
    for i in ids:
        if not 0 <= i < len(dataset.trajectories):
            raise IoError(f"trajectory {i} does not exist (dataset has {len(dataset.trajectories)})")
    return ids


def cmd_rollout(args) -> int:
    params, ablation = load_checkpoint(args.ckpt)
    dataset = load_dataset(resolve_data(args.data))
    norm = dataset.normalizer
    N = params.config.window
    rows = []
    for i in _trajectory_ids(dataset, args.split, args.traj):
        traj = dataset.trajectories[i]
        horizon = args.horizon if args.horizon is not None else traj.num_frames - N
        for name, p in (("model", params), ("persistence", None)):
            res = rollout(p, traj, horizon, norm, ablation, window=N)
            for k in range(horizon):
                f, s = res.rel_fluid[k], res.rel_solid[k]
                rows.append((name, i, k + 1, f, s, 0.5 * (f + s)))
            status = f"diverged at step {res.diverged_at + 1}" if res.diverged_at is not None else "finite"
            print(f"traj {i} {name}: horizon {horizon} mean fluid {res.mean_fluid:.4g}% "
                  f"solid {res.mean_solid:.4g}% ({status})", file=sys.stderr)
    _write_csv(args.out, ROLLOUT_COLUMNS, rows)
    return 0


def cmd_ablate(args) -> int:
    sections = read_config(resolve_config(args.config))
    config = train_config(sections, dict(epochs=args.epochs, seed=args.seed))
    dataset = load_dataset(resolve_data(args.data))
    wanted = set(args.variants.split(",")) if args.variants else None
    variants = [v for v in VARIANTS if wanted is None or v[0] in wanted]
    if wanted is not None and len(variants) != len(wanted):
        raise ConfigError(f"unknown variant(s): {sorted(wanted - {v[0] for v in VARIANTS})}")
    report = ablation_suite(dataset, config, args.out, variants=variants, eval_split=args.split)
    for row in report.table:
        print(f"{row['variant']:>17}: fluid {row['fluid']:.4g}% solid {row['solid']:.4g}%")
    for row in report.pareto:
        print(f"{row['loss']:>17}: val fluid {row['val_fluid']:.4g}% solid {row['val_solid']:.4g}%")
    return 0


def cmd_plot(args) -> int:
    dataset = load_dataset(resolve_data(args.data))
    ids = _trajectory_ids(dataset, "test", args.traj)
    traj = dataset.trajectories[ids[0]]
    if args.ckpt:
        params, ablation = load_checkpoint(args.ckpt)
        N = params.config.window
    else:
        params, ablation, N = None, Ablation(), args.window
    res = rollout(params, traj, traj.num_frames - N, dataset.normalizer, ablation, window=N)
    pred = np.concatenate([traj.frames[:N], res.frames])
    errors = errormap.error_matrix(pred, traj.frames)
    out = Path(args.out)
    errormap.write_ppm(out, errormap.to_rgb(errors))
    csv_path = out.with_suffix(".csv")
    errormap.write_matrix_csv(csv_path, errors)
    print(f"wrote {out} ({traj.num_frames}x{traj.graph.num_nodes}) and {csv_path}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetsolver", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="simulate a dataset with the reference oracle")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--n-traj", type=int, help="number of trajectories (>= 10, default 40)")
    gen.add_argument("--layout", choices=[l.value for l in Layout], help="oracle geometry layout")
    gen.add_argument("--seed", type=int, help="master seed (overrides HETSOLVER_SEED and config)")
    gen.add_argument("--config", help="INI file with [generate] and [physics] sections, or a preset name")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train a model and write checkpoints plus metrics.csv")
    tr.add_argument("--data", required=True, help="dataset directory, or @micro for the bundled one")
    tr.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    tr.add_argument("--config", help="INI file with a [train] section, or a preset name")
    tr.add_argument("--ablation", help=f"full or a '+'-joined subset of {', '.join(ABLATION_NAMES)}")
    tr.add_argument("--loss", help="igbl or fixed:w_f:w_s")
    tr.add_argument("--epochs", type=int, help="override the epoch count")
    tr.add_argument("--seed", type=int, help="override the training seed")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="next-step errors of a checkpoint and of persistence")
    ev.add_argument("--ckpt", required=True, help="checkpoint file")
    ev.add_argument("--data", required=True, help="dataset directory or @micro")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to score")
    ev.add_argument("--out", help="CSV path (default: stdout)")
    ev.set_defaults(func=cmd_eval)

    ro = sub.add_parser("rollout", help="autoregressive rollout errors per step")
    ro.add_argument("--ckpt", required=True, help="checkpoint file")
    ro.add_argument("--data", required=True, help="dataset directory or @micro")
    ro.add_argument("--horizon", type=int, help="steps to roll out (default: all available)")
    ro.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to roll out")
    ro.add_argument("--traj", type=int, help="single trajectory id instead of a whole split")
    ro.add_argument("--out", help="CSV path (default: stdout)")
    ro.set_defaults(func=cmd_rollout)

    ab = sub.add_parser("ablate", help="train every variant plus the fixed-weight sweep")
    ab.add_argument("--data", required=True, help="dataset directory or @micro")
    ab.add_argument("--out", required=True, help="directory for ablation.csv and pareto.csv")
    ab.add_argument("--config", help="INI file with a [train] section, or a preset name")
    ab.add_argument("--epochs", type=int, help="override the epoch count")
    ab.add_argument("--seed", type=int, help="override the training seed")
    ab.add_argument("--variants", help="comma-separated subset of " + ",".join(v[0] for v in VARIANTS))
    ab.add_argument("--split", default="test", choices=("val", "test"), help="split for the table")
    ab.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="space-time error heatmap (PPM) and matrix (CSV)")
    pl.add_argument("--data", required=True, help="dataset directory or @micro")
    pl.add_argument("--traj", type=int, required=True, help="trajectory id")
    pl.add_argument("--out", required=True, help="PPM path; the CSV goes next to it")
    pl.add_argument("--ckpt", help="checkpoint file (omit for the persistence baseline)")
    pl.add_argument("--window", type=int, default=10, help="window length when --ckpt is omitted")
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HetSolverError, ValueError) as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
