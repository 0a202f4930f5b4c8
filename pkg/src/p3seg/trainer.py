"""Two-stage mean-teacher training with scheduled CutMix and boundary-weighted loss.

Stage 1 ("pre-warm") trains the student on labeled batches plus teacher
pseudo-labels on unlabeled batches.  Stage 2 pastes a box of each labeled
image into an unlabeled one, with the box side set by the periodic schedule,
and trains on the mixed image against mixed labels.  The teacher tracks the
student by EMA after every optimizer step.

Everything is a pure function of the config: batches, boxes and
initialisation come from generators seeded by ``(seed, purpose, step)``.
Per-sample gradients are reduced in sample order, so the worker count does
not change a single bit of the result.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import losses, metrics
from .data import ConfigError, Corpus, batch_at
from .mixer import default_epsilon, make_region_mask, mix_images, mix_labels
from .model import (AdamState, ModelParams, NetworkSpec, backward, ema_update, forward,
                    load_checkpoint, pseudo_label, save_checkpoint, sgd_adam_step)
from .schedule import Curve, RampParams, alpha_at, lambda_at, lr_factor_at, solve_curve

log = logging.getLogger(__name__)

LOG_FIELDS = ["iter", "stage", "alpha", "lambda", "lr", "loss"]

# fields that influence stage 1; runs agreeing on these can share a warm start
STAGE1_FIELDS = ("seed", "corpus", "stage1_iters", "batch_size", "delta", "lr", "weight_decay",
                 "lambda_squared", "widths", "grad_clip")


class NumericFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    corpus: str = "corpus"
    out_dir: str = "run"
    label: str = ""
    stage1_iters: int = 500
    stage2_iters: int = 4000
    batch_size: int = 4
    period_T: int = 800
    lower: float = 0.25
    upper: float = 0.9
    epsilon: int | None = None
    delta: float = 0.99
    lr: float = 3e-4
    weight_decay: float = 1e-4
    lambda_squared: bool = False
    invert_paste: bool = False
    curve: str = "exp"
    constant_alpha: float = 0.5
    p3m: bool = True
    boundary_loss: bool = True
    band_ce_norm: str = "region"
    recopy_teacher: bool = True
    widths: tuple[int, ...] = (8, 16)
    grad_clip: float = 10.0
    workers: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def validate(self) -> None:
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("stage iteration counts must be non-negative")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must lie in [0, 1], got {self.delta}")
        try:
            Curve(self.curve)
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.band_ce_norm not in losses.CE_NORMS:
            raise ConfigError(f"band_ce_norm must be one of {losses.CE_NORMS}")
        if self.epsilon is not None and self.epsilon < 1:
            raise ConfigError("epsilon must be >= 1")

    def schedule(self):
        return solve_curve(self.period_T, self.lower, self.upper, self.curve, self.constant_alpha)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)


@dataclass
class TrainState:
    iteration: int
    student: ModelParams
    teacher: ModelParams
    optimizer: AdamState
    log: list[dict] = field(default_factory=list)

    def copy(self) -> "TrainState":
        opt = dataclasses.replace(self.optimizer, m=self.optimizer.m.copy(), v=self.optimizer.v.copy())
        return TrainState(self.iteration, self.student.copy(), self.teacher.copy(), opt,
                          [dict(r) for r in self.log])


def init_state(config: TrainConfig, class_count: int, input_channels: int = 1) -> TrainState:
    spec = NetworkSpec(input_channels, class_count, config.widths)
    student = ModelParams.initialize(spec, np.random.default_rng([config.seed, 0x1817]))
    return TrainState(0, student, student.copy(), AdamState.zeros(len(student)))


# ---------------------------------------------------------------- helpers

class _Reducer:
    """Maps a per-sample job over a batch and sums results in sample order."""

    def __init__(self, workers: int):
        self.pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def __call__(self, fn, items):
        results = list(self.pool.map(fn, items)) if self.pool else [fn(i) for i in items]
        value, grad = results[0][0], results[0][1].copy()
        for v, g in results[1:]:
            value += v
            grad += g
        return value, grad

    def close(self):
        if self.pool:
            self.pool.shutdown()


def _teacher_labels(teacher: ModelParams, images: np.ndarray) -> list[np.ndarray]:
    n = teacher.spec.class_count
    return [pseudo_label(forward(teacher, x)[0], n) for x in images]


def _clip(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad


def _abort(state: TrainState, config: TrainConfig, value: float, out_dir: Path | None):
    """Save the student for inspection and stop."""
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state.student, out_dir / "diagnostic.ckpt",
                        {"seed": config.seed, "iter": state.iteration, "loss": repr(value)})
    raise NumericFailure(f"non-finite loss {value} at iteration {state.iteration}")


def _reduce(reducer, job, items, state, config, out_dir):
    try:
        return reducer(job, items)
    except FloatingPointError:
        _abort(state, config, math.nan, out_dir)


def _step(state: TrainState, config: TrainConfig, value: float, grad: np.ndarray, lr: float,
          row: dict, out_dir: Path | None) -> None:
    if not (math.isfinite(value) and np.isfinite(grad).all()):
        _abort(state, config, value, out_dir)
    sgd_adam_step(state.student, _clip(grad, config.grad_clip), state.optimizer, lr,
                  config.weight_decay)
    ema_update(state.teacher, state.student, config.delta)
    row.update(iter=state.iteration, lr=lr, loss=value)
    state.log.append(row)
    state.iteration += 1


def _stage1_job(student, lam, scale):
    def job(item):
        xs, ys, xu, yu = item
        ls, cs = forward(student, xs)
        lu, cu = forward(student, xu)
        value, gs, gu = losses.stage1_loss(ls, ys, lu, yu, lam)
        return value * scale, backward(cs, gs * scale) + backward(cu, gu * scale)
    return job


# ---------------------------------------------------------------- stages

def run_stage1(config: TrainConfig, corpus: Corpus, state: TrainState | None = None,
               out_dir: Path | None = None) -> TrainState:
    """Pre-warm: supervised CE + Dice plus ramped-weight pseudo-label loss."""
    m = corpus.manifest
    if state is None:
        state = init_state(config, m.class_count)
    ramp = RampParams(max(config.stage1_iters, 1), lambda_squared=config.lambda_squared)
    reducer = _Reducer(config.workers)
    try:
        with threadpool_limits(1):
            for k in range(config.stage1_iters):
                lab, unl = batch_at(m, config.batch_size, config.seed, state.iteration)
                xs, ys, xu = corpus.images(lab), corpus.labels(lab), corpus.images(unl)
                yu = _teacher_labels(state.teacher, xu)
                lam = lambda_at(ramp, k)
                job = _stage1_job(state.student, lam, 1.0 / config.batch_size)
                value, grad = _reduce(reducer, job, list(zip(xs, ys, xu, yu)), state, config, out_dir)
                lr = config.lr * lr_factor_at(ramp, k)
                _step(state, config, value, grad, lr, {"stage": 1, "alpha": "", "lambda": lam}, out_dir)
    finally:
        reducer.close()
    return state


def run_stage2(config: TrainConfig, corpus: Corpus, warm_state: TrainState,
               out_dir: Path | None = None) -> TrainState:
    """Scheduled CutMix stage.

    With ``p3m`` off the stage keeps the pre-warm objective at its final
    weight instead, which gives an equal-budget baseline.
    """
    m = corpus.manifest
    state = warm_state.copy()
    if config.recopy_teacher:
        state.teacher = state.student.copy()
    sched = config.schedule()
    ramp = RampParams(max(config.stage2_iters, 1), lambda_squared=config.lambda_squared)
    eps = config.epsilon or default_epsilon(m.H, m.W)
    scale = 1.0 / config.batch_size
    reducer = _Reducer(config.workers)
    try:
        with threadpool_limits(1):
            for k in range(config.stage2_iters):
                lab, unl = batch_at(m, config.batch_size, config.seed, state.iteration)
                xs, ys, xu = corpus.images(lab), corpus.labels(lab), corpus.images(unl)
                yu = _teacher_labels(state.teacher, xu)
                if not config.p3m:
                    lam = ramp.base_weight
                    job = _stage1_job(state.student, lam, scale)
                    value, grad = _reduce(reducer, job, list(zip(xs, ys, xu, yu)), state, config,
                                          out_dir)
                    row = {"stage": 2, "alpha": "", "lambda": lam}
                else:
                    alpha = alpha_at(sched, k)
                    rng = np.random.default_rng([config.seed, 0xC07, k])
                    plans = [make_region_mask(m.H, m.W, alpha, rng, eps) for _ in lab]
                    value, grad = _reduce(reducer, _stage2_job(state.student, config, scale),
                                          list(zip(xs, ys, xu, yu, plans)), state, config, out_dir)
                    row = {"stage": 2, "alpha": alpha, "lambda": ""}
                lr = config.lr * lr_factor_at(ramp, k)
                _step(state, config, value, grad, lr, row, out_dir)
    finally:
        reducer.close()
    return state


def _stage2_job(student, config, scale):
    def job(item):
        xs, ys, xu, yu, plan = item
        if config.invert_paste:
            x_mix, y_mix = mix_images(xs, xu, plan), mix_labels(ys, yu, plan)
        else:
            x_mix, y_mix = mix_images(xu, xs, plan), mix_labels(yu, ys, plan)
        logits, cache = forward(student, x_mix)
        if config.boundary_loss:
            loss = losses.stage2_loss(logits, y_mix, plan.band_mask, ce_norm=config.band_ce_norm)
        else:
            loss = losses.seg_loss(logits, y_mix)
        return loss.value * scale, backward(cache, loss.grad * scale)
    return job


# ---------------------------------------------------------------- evaluation

def predict(params: ModelParams, images: np.ndarray) -> np.ndarray:
    return np.stack([forward(params, x)[0].argmax(axis=0) for x in images])


def evaluate(params: ModelParams, corpus: Corpus, ids=None, csv_path=None):
    """Score the network on ``ids`` (default: the test split) and optionally write CSV."""
    m = corpus.manifest
    ids = list(m.test if ids is None else ids)
    if not ids:
        raise ConfigError("evaluation split is empty")
    with threadpool_limits(1):
        preds = predict(params, corpus.images(ids))
    reports = [metrics.evaluate_sample(i, p, corpus.samples[i].label, m.class_count)
               for i, p in zip(ids, preds)]
    summary = metrics.summarize(reports)
    if csv_path is not None:
        Path(csv_path).write_text(metrics_csv(reports, summary))
    return reports, summary


def _fmt(x) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}"


def metrics_csv(reports, summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "class", "dice", "jaccard", "hd95", "asd", "surface_defined"])
    for r in reports:
        for c in r.classes:
            w.writerow([r.sample_id, c.class_id, _fmt(c.dice), _fmt(c.jaccard), _fmt(c.hd95),
                        _fmt(c.asd), int(c.surface_defined)])
    w.writerow(["mean", "all", _fmt(summary["dice"]), _fmt(summary["jaccard"]),
                _fmt(summary["hd95"]), _fmt(summary["asd"]), summary["undefined"]])
    return buf.getvalue()


def read_summary(csv_path) -> dict:
    """Summary row and the sample ids of a ``metrics.csv``."""
    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or rows[-1]["sample"] != "mean":
        raise ConfigError(f"{csv_path}: missing summary row")
    last = rows[-1]
    return {"dice": float(last["dice"]), "jaccard": float(last["jaccard"]),
            "hd95": float(last["hd95"]), "asd": float(last["asd"]),
            "samples": sorted({r["sample"] for r in rows[:-1]})}


# ---------------------------------------------------------------- pipeline

def write_log(rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["iter"], r["stage"]] + [repr(r[k]) if r[k] != "" else "" for k in LOG_FIELDS[2:]])
    Path(path).write_text(buf.getvalue())


def finish_run(config: TrainConfig, corpus: Corpus, state: TrainState) -> dict:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    write_log(state.log, out / "train_log.csv")
    meta = {"seed": config.seed, "iter": state.iteration}
    save_checkpoint(state.student, out / "student.ckpt", meta)
    save_checkpoint(state.teacher, out / "teacher.ckpt", meta)
    _, summary = evaluate(state.student, corpus, csv_path=out / "metrics.csv")
    log.info("%s: dice %.2f jaccard %.2f hd95 %.2f asd %.2f", out, summary["dice"],
             summary["jaccard"], summary["hd95"], summary["asd"])
    return summary


def train(config: TrainConfig, corpus: Corpus | None = None, warm_state: TrainState | None = None) -> tuple[TrainState, dict]:
    """Both stages, then evaluation; writes config, log, checkpoints and metrics."""
    config.validate()
    corpus = corpus or Corpus(config.corpus)
    out = Path(config.out_dir)
    if warm_state is None:
        warm_state = run_stage1(config, corpus, out_dir=out)
    state = run_stage2(config, corpus, warm_state, out_dir=out)
    return state, finish_run(config, corpus, state)


def stage1_key(config: TrainConfig) -> tuple:
    return tuple(getattr(config, f) for f in STAGE1_FIELDS)


def run_many(configs: list[TrainConfig], corpus: Corpus) -> list[dict]:
    """Train each config, computing each distinct stage 1 only once."""
    warm: dict[tuple, TrainState] = {}
    summaries = []
    for cfg in configs:
        key = stage1_key(cfg)
        if key not in warm:
            warm[key] = run_stage1(cfg, corpus, out_dir=Path(cfg.out_dir))
        summaries.append(train(cfg, corpus, warm[key])[1])
    return summaries


