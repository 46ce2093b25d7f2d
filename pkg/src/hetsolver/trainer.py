"""Optimisation loop, evaluation, autoregressive rollout and the ablation harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .datagen import Dataset, Normalizer, Trajectory, make_window, windows
from .errors import NonFinite, TooShort
from .hetgraph import NodeKind
from .losses import METRIC_COLUMNS, RelativeL2, domain_losses, fixed_weight_loss, igbl
from .model import (KINDS, Ablation, GraphBatch, ModelConfig, ModelParams, forward, init_params,
                    make_batch, save_checkpoint)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    window: int = 10
    seed: int = 0
    loss: str = "igbl"
    ablation: Ablation = Ablation()
    d: int = 64
    layers: int = 4
    time_dim: int = 8
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.window < 1 or self.batch_size < 1:
            raise ValueError("epochs, window and batch_size must be >= 1")
        if not self.lr_max >= self.lr_min > 0:
            raise ValueError("need lr_max >= lr_min > 0")
        parse_loss(self.loss)

    def model_config(self, pos_dim: int, phys_dim: int) -> ModelConfig:
        return ModelConfig(d=self.d, layers=self.layers, window=self.window, pos_dim=pos_dim,
                           time_dim=self.time_dim, phys_dim=phys_dim, activation=self.activation)


def parse_loss(text: str) -> tuple[str, float, float]:
    """``"igbl"`` or ``"fixed:w_f:w_s"``."""
    if text == "igbl":
        return "igbl", 1.0, 1.0
    parts = text.split(":")
    if parts[0] == "fixed" and len(parts) == 3:
        w_f, w_s = float(parts[1]), float(parts[2])
        if w_f > 0 and w_s > 0:
            return "fixed", w_f, w_s
    raise ValueError(f"loss must be 'igbl' or 'fixed:w_f:w_s' with positive weights, got {text!r}")


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError("step outside schedule")
    frac = step / total_steps if total_steps else 1.0
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay, updating ModelParams in place."""

    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(t.data) for t in params]
        self.v = [np.zeros_like(t.data) for t in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for tensor, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            tensor.data = tensor.data - lr * (update + self.weight_decay * tensor.data)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return grads, norm


# ---------------------------------------------------------------- samples


@dataclass(eq=False)
class Sample:
    traj: Trajectory
    window: object
    target: np.ndarray
    t: int


def collect_samples(trajs: Sequence[Trajectory], N: int, norm: Normalizer) -> list[Sample]:
    out = []
    for traj in trajs:
        for t, (window, target) in enumerate(windows(traj, N, norm), start=N - 1):
            out.append(Sample(traj, window, target, t))
    return out


def batch_of(samples: Sequence[Sample], norm: Normalizer) -> tuple[GraphBatch, dict]:
    batch = make_batch([(s.traj.graph, s.window) for s in samples], norm.pos_mean, norm.pos_std)
    target = np.concatenate([s.target for s in samples])
    return batch, {k: target[batch.kind_rows[k]] for k in KINDS}


def step_loss(batch: GraphBatch, target: dict, params: ModelParams, ablation: Ablation, loss: str):
    mode, w_f, w_s = parse_loss(loss)
    result = forward(batch, params, ablation)
    losses = domain_losses(result.delta, target)
    if mode == "igbl":
        total = igbl(losses, params["log_var_fluid"], params["log_var_solid"])
    else:
        total = fixed_weight_loss(losses, w_f, w_s)
    return total, losses, result


def _domain_norms(batch: GraphBatch, samples: Sequence[Sample], pred_delta: dict | None,
                  norm: Normalizer, accs: dict) -> None:
    """Accumulate physical-unit relative errors of next-frame predictions per domain."""
    last = np.concatenate([s.traj.frames[s.t] for s in samples])
    truth = np.concatenate([s.traj.frames[s.t + 1] for s in samples])
    for kind in KINDS:
        rows = batch.kind_rows[kind]
        if pred_delta is None:
            pred = last[rows]
        else:
            pred = last[rows] + norm.delta_from_norm(pred_delta[kind], batch.kinds[rows])
        owner = batch.sample_of[rows]
        for s in range(batch.num_samples):
            mine = owner == s
            accs[kind].add_norms(_sq_norm(pred[mine] - truth[rows][mine]), _sq_norm(truth[rows][mine]))


@dataclass
class EvalResult:
    l_fluid: float
    l_solid: float
    rel_fluid: float
    rel_solid: float

    @property
    def rel_combined(self) -> float:
        return 0.5 * (self.rel_fluid + self.rel_solid)


def evaluate(params: ModelParams, samples: Sequence[Sample], norm: Normalizer,
             ablation: Ablation = Ablation(), batch_size: int = 64,
             persistence: bool = False) -> EvalResult:
    """Next-step losses (normalised) and relative l2 (percent, physical units).

    With ``persistence=True`` the prediction is a zero delta.
    """
    accs = {k: RelativeL2() for k in KINDS}
    sq = {k: 0.0 for k in KINDS}
    count = {k: 0 for k in KINDS}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch, target = batch_of(chunk, norm)
        if persistence:
            delta = {k: np.zeros_like(target[k]) for k in KINDS}
        else:
            delta = {k: v.data for k, v in forward(batch, params, ablation).delta.items()}
        for k in KINDS:
            sq[k] += float(np.sum((delta[k] - target[k]) ** 2))
            count[k] += target[k].size
        _domain_norms(batch, chunk, delta if not persistence else None, norm, accs)
    return EvalResult(sq[NodeKind.FLUID] / max(count[NodeKind.FLUID], 1),
                      sq[NodeKind.SOLID] / max(count[NodeKind.SOLID], 1),
                      accs[NodeKind.FLUID].value, accs[NodeKind.SOLID].value)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: ModelParams
    ablation: Ablation
    history: list = field(default_factory=list)
    final_loss: float = float("nan")
    best_val: float = float("inf")
    best_params: ModelParams | None = None
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def _metrics_header(config: TrainConfig) -> str:
    parts = [f"{f.name}={getattr(config, f.name)}" for f in fields(config) if f.name != "ablation"]
    return f"# ablation={config.ablation.label} " + " ".join(parts)


def write_metrics(path: Path, rows: list[dict], header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(METRIC_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in METRIC_COLUMNS})


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def train(dataset: Dataset, config: TrainConfig, out_dir: str | Path | None = None,
          train_trajs: Sequence[Trajectory] | None = None,
          val_trajs: Sequence[Trajectory] | None = None) -> TrainResult:
    """Train from scratch. Deterministic for a given seed.

    Writes ``metrics.csv``, ``final.ckpt`` and ``best.ckpt`` into ``out_dir``
    when given.
    """
    norm = dataset.normalizer
    train_set = collect_samples(train_trajs if train_trajs is not None else dataset.split("train"),
                                config.window, norm)
    val_set = collect_samples(val_trajs if val_trajs is not None else dataset.split("val"),
                              config.window, norm)
    if not train_set:
        raise TooShort("no training windows")
    cfg = config.model_config(dataset.pos_dim, len(norm.phys_mean))
    params = init_params(cfg, config.seed)
    opt = AdamW(params, config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    result = TrainResult(params, config.ablation)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = np.zeros(2)
        accs = {k: RelativeL2() for k in KINDS}
        for b in range(steps_per_epoch):
            chunk = [train_set[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            batch, target = batch_of(chunk, norm)
            try:
                with ad.Tape() as tape:
                    total, losses, res = step_loss(batch, target, params, config.ablation, config.loss)
                grads = ad.grad(tape, total, params)
                if not all(np.all(np.isfinite(g)) for g in grads):
                    raise NonFinite("non-finite gradient")
            except NonFinite as err:
                raise NonFinite(f"epoch {epoch} step {step}: {err}") from err
            grads, _ = clip_global_norm(grads, config.clip_norm)
            opt.step(grads, cosine_lr(step, total_steps, config.lr_max, config.lr_min))
            step += 1
            sums += losses.values()
            result.final_loss = float(total.data)
            _domain_norms(batch, chunk, {k: v.data for k, v in res.delta.items()}, norm, accs)

        s2f, s2s = (math.exp(float(params[n].data)) for n in ("log_var_fluid", "log_var_solid"))
        l_f, l_s = sums / steps_per_epoch
        result.history.append(dict(
            epoch=epoch, split="train", l_fluid=l_f, l_solid=l_s, sigma2_f=s2f, sigma2_s=s2s,
            rel_l2_fluid=accs[NodeKind.FLUID].value, rel_l2_solid=accs[NodeKind.SOLID].value,
            rel_l2_combined=0.5 * (accs[NodeKind.FLUID].value + accs[NodeKind.SOLID].value)))
        if val_set:
            ev = evaluate(params, val_set, norm, config.ablation)
            result.history.append(dict(
                epoch=epoch, split="val", l_fluid=ev.l_fluid, l_solid=ev.l_solid, sigma2_f=s2f,
                sigma2_s=s2s, rel_l2_fluid=ev.rel_fluid, rel_l2_solid=ev.rel_solid,
                rel_l2_combined=ev.rel_combined))
            if ev.rel_combined < result.best_val:
                result.best_val = ev.rel_combined
                result.best_params = params.copy()
        log.info("epoch %d loss %.6g val %.4g", epoch, result.final_loss, result.best_val)

    if out is not None:
        write_metrics(out / "metrics.csv", result.history, _metrics_header(config))
        result.checkpoint = out / "final.ckpt"
        save_checkpoint(result.checkpoint, params, config.ablation)
        result.best_checkpoint = out / "best.ckpt"
        save_checkpoint(result.best_checkpoint, result.best_params or params, config.ablation)
    return result


# ---------------------------------------------------------------- rollout


@dataclass
class RolloutResult:
    frames: np.ndarray
    rel_fluid: np.ndarray
    rel_solid: np.ndarray
    diverged_at: int | None = None

    @property
    def mean_fluid(self) -> float:
        return _nanmean(self.rel_fluid)

    @property
    def mean_solid(self) -> float:
        return _nanmean(self.rel_solid)

    @property
    def mean_combined(self) -> float:
        return 0.5 * (self.mean_fluid + self.mean_solid)


def _nanmean(x: np.ndarray) -> float:
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def _sq_norm(x: np.ndarray) -> float:
    # One summation order for every error path, so they agree to the bit.
    return float(np.sum(np.sum(x * x, axis=1)))


def _step_error(pred: np.ndarray, truth: np.ndarray) -> float:
    ref = _sq_norm(truth)
    if ref <= 0.0:
        return float("nan")
    return 100.0 * math.sqrt(_sq_norm(pred - truth) / ref)


def rollout(params: ModelParams | None, trajectory: Trajectory, horizon: int, norm: Normalizer,
            ablation: Ablation = Ablation(), window: int | None = None) -> RolloutResult:
    """Feed predictions back into the window for ``horizon`` steps.

    ``params=None`` gives the persistence baseline. Divergence is reported
    through ``diverged_at`` rather than raised.
    """
    N = params.config.window if params is not None else window
    if N is None:
        raise ValueError("window length required for the persistence rollout")
    if horizon > trajectory.num_frames - N:
        raise TooShort(f"horizon {horizon} exceeds {trajectory.num_frames - N} available steps")
    kinds = trajectory.graph.node_kinds.astype(np.int64)
    masks = {k: kinds == k for k in KINDS}
    hist = [trajectory.frames[i] for i in range(N)]
    preds = np.full((horizon,) + trajectory.frames.shape[1:], np.nan)
    rel = {k: np.full(horizon, np.nan) for k in KINDS}
    diverged = None
    for k in range(horizon):
        last = hist[-1]
        if params is None:
            nxt = last.copy()
        else:
            try:
                batch = make_batch([(trajectory.graph, make_window(trajectory, norm, np.stack(hist[-N:])))],
                                   norm.pos_mean, norm.pos_std)
                delta = forward(batch, params, ablation).delta_rows(batch)
                nxt = last + norm.delta_from_norm(delta, kinds)
            except NonFinite:
                diverged = k
                break
            if not np.all(np.isfinite(nxt)):
                diverged = k
                break
        preds[k] = nxt
        truth = trajectory.frames[N + k]
        for kind in KINDS:
            rel[kind][k] = _step_error(nxt[masks[kind]], truth[masks[kind]])
        hist.append(nxt)
    return RolloutResult(preds, rel[NodeKind.FLUID], rel[NodeKind.SOLID], diverged)


# ---------------------------------------------------------------- ablations

VARIANTS = (
    ("full", Ablation(), "igbl"),
    ("no_physics", Ablation(no_physics=True), "igbl"),
    ("no_pcgm", Ablation(no_pcgm=True), "igbl"),
    ("no_learnable_agg", Ablation(no_learnable_agg=True), "igbl"),
    ("no_igbl", Ablation(), "fixed:1:1"),
    ("no_time_embed", Ablation(no_time_embed=True), "igbl"),
    ("homogeneous", Ablation(homogeneous=True), "igbl"),
)
PARETO_RATIOS = ((1, 1), (1, 2), (1, 3), (1, 5))


@dataclass
class AblationReport:
    table: list = field(default_factory=list)
    pareto: list = field(default_factory=list)

    def row(self, variant: str) -> dict:
        return next(r for r in self.table if r["variant"] == variant)


def ablation_suite(dataset: Dataset, config: TrainConfig, out_dir: str | Path | None = None,
                   variants=VARIANTS, ratios=PARETO_RATIOS, eval_split: str = "test") -> AblationReport:
    """Train every variant under one seed and budget; tabulate next-step errors.

    The table reports ``eval_split`` errors; the fixed-weight sweep reports
    validation errors next to the uncertainty-weighted run.
    """
    norm = dataset.normalizer
    eval_set = collect_samples(dataset.split(eval_split), config.window, norm)
    val_set = collect_samples(dataset.split("val"), config.window, norm)
    cache: dict = {}

    def run(ablation: Ablation, loss: str):
        key = (ablation, loss)
        if key not in cache:
            res = train(dataset, replace(config, ablation=ablation, loss=loss))
            cache[key] = (evaluate(res.params, eval_set, norm, ablation),
                          evaluate(res.params, val_set, norm, ablation))
        return cache[key]

    report = AblationReport()
    for name, ablation, loss in variants:
        ev, val = run(ablation, loss)
        report.table.append(dict(variant=name, loss=loss, fluid=ev.rel_fluid, solid=ev.rel_solid,
                                 combined=ev.rel_combined, val_fluid=val.rel_fluid,
                                 val_solid=val.rel_solid))
    for w_f, w_s in ratios:
        _, val = run(Ablation(), f"fixed:{w_f}:{w_s}")
        report.pareto.append(dict(loss=f"fixed:{w_f}:{w_s}", w_f=w_f, w_s=w_s,
                                  val_fluid=val.rel_fluid, val_solid=val.rel_solid))
    _, val = run(Ablation(), "igbl")
    report.pareto.append(dict(loss="igbl", w_f="", w_s="", val_fluid=val.rel_fluid,
                              val_solid=val.rel_solid))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "ablation.csv", report.table)
        _write_rows(out / "pareto.csv", report.pareto)
    return report


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
