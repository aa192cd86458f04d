"""Measurement procedures: APE distributions, identifier F1, the black/white
noise-ratio ablation, gradient-descent restoration, and plot/table emission.

APE is computed in normalized parameter units with a guarded denominator:
ape = 100 * |pred - truth| / max(|truth|, 0.1). The plain absolute error is
carried alongside in every summary since the percentage metric is undefined
for near-zero ground truth without the guard.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from . import data as dmod
from . import nets
from . import training
from . import transforms as tf
from .data import PairBatch

APE_EPS = 0.1


class MetricError(ValueError):
    """Metric undefined for the given sample collection."""


class OptimizationFailure(RuntimeError):
    """Input-space gradient descent produced non-finite values."""


@dataclass
class ApeSummary:
    """Per-parameter quartile summary of absolute percentage errors."""

    q1: np.ndarray
    median: np.ndarray
    q3: np.ndarray
    mean: np.ndarray
    mean_abs_err: np.ndarray  # plain |pred-truth|, for transparency
    count: int
    split: str = ""

    def __post_init__(self):
        if not (np.all(self.q1 <= self.median) and np.all(self.median <= self.q3)):
            raise ValueError("quartiles out of order")
        if np.any(self.q1 < 0):
            raise ValueError("APE must be non-negative")

    def as_rows(self) -> list[dict]:
        return [
            {
                "param": i,
                "q1": float(self.q1[i]),
                "median": float(self.median[i]),
                "q3": float(self.q3[i]),
                "mean": float(self.mean[i]),
                "mean_abs_err": float(self.mean_abs_err[i]),
                "count": self.count,
                "split": self.split,
            }
            for i in range(len(self.median))
        ]


def ape_values(preds: np.ndarray, truths: np.ndarray, eps: float = APE_EPS) -> np.ndarray:
    """Raw per-sample APE matrix (N, d), normalized units."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if preds.shape != truths.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {truths.shape}")
    return 100.0 * np.abs(preds - truths) / np.maximum(np.abs(truths), eps)


def compute_ape(preds: np.ndarray, truths: np.ndarray, split: str = "") -> ApeSummary:
    if len(preds) == 0:
        raise ValueError("empty batch")
    a = ape_values(preds, truths)
    p2 = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    t2 = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    return ApeSummary(
        q1=np.percentile(a, 25, axis=0),
        median=np.percentile(a, 50, axis=0),
        q3=np.percentile(a, 75, axis=0),
        mean=a.mean(axis=0),
        mean_abs_err=np.abs(p2 - t2).mean(axis=0),
        count=len(a),
        split=split,
    )


@dataclass
class EstimatorEvaluation:
    train: ApeSummary
    test: ApeSummary
    scatter: dict = field(default_factory=dict)  # split -> (preds, truths)


def _collect_predictions(model: nets.TrainedModel, stream: Iterable[PairBatch], max_samples: int):
    preds, truths = [], []
    seen = 0
    for batch in stream:
        if batch.kind != model.spec.kind:
            raise tf.ConfigurationError(
                f"stream kind {batch.kind!r} does not match model kind {model.spec.kind!r}"
            )
        if model.spec.family == "vanilla":
            out = model.predict_images(batch.x_t1)
        else:
            out = model.predict_pairs(batch.x_t, batch.x_t1)
        preds.append(out)
        truths.append(batch.target)
        seen += len(batch)
        if seen >= max_samples:
            break
    if not preds:
        raise ValueError("empty stream")
    return np.concatenate(preds)[:max_samples], np.concatenate(truths)[:max_samples]


def evaluate_estimator(
    model: nets.TrainedModel,
    train_stream: Iterable[PairBatch],
    test_stream: Iterable[PairBatch],
    max_samples: int = 1000,
) -> EstimatorEvaluation:
    """APE summaries over the train- and test-domain streams plus scatter data."""
    p_tr, t_tr = _collect_predictions(model, train_stream, max_samples)
    p_te, t_te = _collect_predictions(model, test_stream, max_samples)
    return EstimatorEvaluation(
        train=compute_ape(p_tr, t_tr, split="train"),
        test=compute_ape(p_te, t_te, split="test"),
        scatter={"train": (p_tr, t_tr), "test": (p_te, t_te)},
    )


# ---------------------------------------------------------------------------
# identifier metrics


def f1_score(labels: np.ndarray, preds: np.ndarray) -> float:
    """F1 with positive class 1. Deliberately hand-rolled and tiny."""
    labels = np.asarray(labels).astype(int).ravel()
    preds = np.asarray(preds).astype(int).ravel()
    if len(labels) != len(preds) or len(labels) == 0:
        raise ValueError("labels/preds must be equal-length and non-empty")
    tp = int(np.sum((labels == 1) & (preds == 1)))
    fp = int(np.sum((labels == 0) & (preds == 1)))
    fn = int(np.sum((labels == 1) & (preds == 0)))
    if tp == 0 and (fp + fn) == 0:
        return 1.0 if np.all(labels == preds) else 0.0
    return 2 * tp / (2 * tp + fp + fn)


def evaluate_identifier(
    model: nets.TrainedModel,
    stream: Iterable[PairBatch],
    max_samples: int = 1000,
    threshold: float = 0.5,
) -> float:
    """F1 of thresholded same-content scores over an identity-pair stream."""
    if model.spec.kind != nets.IDENTITY:
        raise tf.ConfigurationError(f"model kind {model.spec.kind!r} is not an identifier")
    scores, labels = [], []
    seen = 0
    for batch in stream:
        scores.append(model.predict_pairs(batch.x_t, batch.x_t1))
        labels.append(batch.target)
        seen += len(batch)
        if seen >= max_samples:
            break
    if not scores:
        raise ValueError("empty stream")
    s = np.concatenate(scores)[:max_samples].ravel()
    y = np.concatenate(labels)[:max_samples].ravel().astype(int)
    if len(np.unique(y)) < 2:
        raise MetricError("single-class stream: F1 undefined")
    return f1_score(y, (s >= threshold).astype(int))


# ---------------------------------------------------------------------------
# black/white ratio ablation


def bw_ratio_sweep(
    ratios: list[float],
    kind: str,
    eval_target,
    *,
    train_cfg: training.TrainConfig,
    stream_cfg: dmod.StreamConfig,
    eval_pairs: int = 500,
    seed: int = 0,
    cache_dir: Optional[Path] = None,
) -> dict:
    """One estimator per black-pixel ratio, each scored on the eval target(s).

    eval_target is "mnist" (plain test digits), "mnist_b" (pixel-swapped
    ones), or a sequence of those. A sequence reuses each ratio's trained
    model for every target and returns {ratio: {target: ApeSummary}}; a
    bare string keeps the flat {ratio: ApeSummary} shape. Both targets
    draw the same transforms, so summaries differ only by pixel polarity.
    """
    if not ratios:
        raise ValueError("empty ratio list")
    single = isinstance(eval_target, str)
    targets = (eval_target,) if single else tuple(eval_target)
    for t in targets:
        if t not in ("mnist", "mnist_b"):
            raise tf.ConfigurationError(f"eval_target must be mnist or mnist_b, got {t!r}")
    cache_dir = cache_dir if cache_dir is not None else stream_cfg.cache_dir
    plain = dmod.get_image_set("mnist_test", cache_dir)
    eval_batches = {}
    for t in targets:
        target_set = dmod.invert_images(plain) if t == "mnist_b" else plain
        eval_batches[t] = dmod.materialize_pairs(
            target_set.images, eval_pairs, kind, np.random.default_rng(seed + 7)
        )

    out: dict = {}
    spec = nets.ModelSpec("factornet", dmod.EXP_NOISE, kind)
    for ratio in ratios:
        scfg = dmod.StreamConfig(
            epochs=stream_cfg.epochs,
            pairs_per_epoch=stream_cfg.pairs_per_epoch,
            p_black=ratio,
            cache_dir=cache_dir,
        )
        stream = dmod.build_experiment_stream(
            dmod.EXP_NOISE, "train", kind, train_cfg.batch_size, np.random.default_rng(seed), scfg
        )
        model, _ = training.train_estimator(spec, stream, train_cfg, train_source="noise")
        per_target = {}
        for t in targets:
            batch = eval_batches[t]
            preds = model.predict_pairs(batch.x_t, batch.x_t1)
            per_target[t] = compute_ape(preds, batch.target, split=f"{t}@{ratio}")
        out[ratio] = per_target[eval_target] if single else per_target
    return out


# ---------------------------------------------------------------------------
# restoration by input-space gradient descent


@dataclass
class RestorationResult:
    initial: np.ndarray
    target: np.ndarray  # normalized translation params
    final: np.ndarray
    loss_trace: list[float]
    com_offset_px: tuple[float, float]  # (dx, dy): +x right, +y down


def center_of_mass(img: np.ndarray) -> tuple[float, float]:
    """Intensity-weighted centroid (row, col) of an (H,W,C) image."""
    w = img.sum(axis=2).astype(np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("image has no bright mass")
    rr, cc = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    return float((rr * w).sum() / total), float((cc * w).sum() / total)


def restore_by_gradient(
    estimator: nets.TrainedModel,
    x_t: np.ndarray,
    theta_target: np.ndarray,
    alpha: float = 0.05,
    steps: int = 500,
) -> RestorationResult:
    """Optimize x_t1 from x_t so the estimator reads the target translation.

    Plain gradient descent on the input image with per-step clamping to
    [0,1]; works only for translation models of the pair-conditioned
    families.
    """
    if estimator.spec.kind != tf.TRANSLATION:
        raise tf.ConfigurationError("restoration needs a translation estimator")
    if estimator.spec.family not in ("factornet", "siamese"):
        raise tf.ConfigurationError("restoration needs a pair-conditioned model family")
    net = estimator.net.eval()
    theta = torch.tensor(np.asarray(theta_target, dtype=np.float32).reshape(1, -1))
    base = torch.from_numpy(np.ascontiguousarray(x_t.transpose(2, 0, 1))[None]).float()
    x = base.clone().requires_grad_(True)
    trace: list[float] = []
    for _ in range(steps):
        if estimator.spec.family == "factornet":
            out = net(torch.cat([base, x], dim=1))
        else:
            out = net(base, x)
        loss = torch.nn.functional.mse_loss(out, theta)
        (grad,) = torch.autograd.grad(loss, x)
        if not torch.isfinite(grad).all():
            raise OptimizationFailure("non-finite input gradient")
        trace.append(float(loss.detach()))
        with torch.no_grad():
            x = (x - alpha * grad).clamp_(0.0, 1.0)
        x.requires_grad_(True)
    final = x.detach().numpy()[0].transpose(1, 2, 0)
    r0, c0 = center_of_mass(x_t)
    r1, c1 = center_of_mass(final)
    return RestorationResult(
        initial=x_t,
        target=np.asarray(theta_target, dtype=np.float64),
        final=final,
        loss_trace=trace,
        com_offset_px=(c1 - c0, r1 - r0),
    )


# ---------------------------------------------------------------------------
# plots and tables


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def emit_plots(results: dict, out_dir: Path) -> list[Path]:
    """Write one PNG + CSV per result entry; returns the produced paths.

    Dispatch by value type: ApeSummary mappings become quartile bars,
    LearningCurve mappings become line plots, float mappings become bar
    charts, (preds, truths) tuples become scatter plots.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, value in results.items():
        png = out_dir / f"{name}.png"
        csvp = out_dir / f"{name}.csv"
        if isinstance(value, ApeSummary):
            value = {value.split or "all": value}
        if isinstance(value, dict) and value and isinstance(next(iter(value.values())), ApeSummary):
            fig, ax = plt.subplots(figsize=(6, 4))
            rows = []
            ticks = []
            for i, (label, summ) in enumerate(value.items()):
                for j in range(len(summ.median)):
                    pos = i + j * 0.15
                    ax.vlines(pos, summ.q1[j], summ.q3[j], lw=6, alpha=0.5)
                    ax.plot(pos, summ.median[j], "k_", ms=12)
                ticks.append((i, str(label)))
                rows += [[label, *r.values()] for r in summ.as_rows()]
            ax.set_xticks([t[0] for t in ticks])
            ax.set_xticklabels([t[1] for t in ticks], rotation=30, ha="right")
            ax.set_ylabel("APE (%)")
            fig.tight_layout()
            fig.savefig(png)
            plt.close(fig)
            _write_csv(
                csvp,
                ["label", "param", "q1", "median", "q3", "mean", "mean_abs_err", "count", "split"],
                rows,
            )
        elif isinstance(value, dict) and value and isinstance(
            next(iter(value.values())), training.LearningCurve
        ):
            fig, ax = plt.subplots(figsize=(6, 4))
            rows = []
            for label, curve in value.items():
                steps = [p[0] for p in curve.points]
                losses = [p[1] for p in curve.points]
                ax.plot(steps, losses, label=str(label))
                rows += [[label, *p] for p in curve.points]
            ax.set_xlabel("step")
            ax.set_ylabel("train loss")
            ax.legend()
            fig.tight_layout()
            fig.savefig(png)
            plt.close(fig)
            _write_csv(csvp, ["label", "step", "train_loss", "eval_metric"], rows)
        elif isinstance(value, dict) and value and all(
            isinstance(v, (int, float)) for v in value.values()
        ):
            fig, ax = plt.subplots(figsize=(6, 4))
            keys = [str(k) for k in value]
            ax.bar(keys, list(value.values()))
            ax.set_ylabel("value")
            plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
            fig.tight_layout()
            fig.savefig(png)
            plt.close(fig)
            _write_csv(csvp, ["label", "value"], [[k, v] for k, v in value.items()])
        elif isinstance(value, tuple) and len(value) == 2:
            preds, truths = value
            fig, ax = plt.subplots(figsize=(4.5, 4.5))
            ax.scatter(np.ravel(truths), np.ravel(preds), s=4, alpha=0.4)
            ax.plot([-1, 1], [-1, 1], "k--", lw=1)
            ax.set_xlabel("ground truth")
            ax.set_ylabel("prediction")
            fig.tight_layout()
            fig.savefig(png)
            plt.close(fig)
            _write_csv(
                csvp,
                ["truth", "pred"],
                [[float(t), float(p)] for t, p in zip(np.ravel(truths), np.ravel(preds))],
            )
        else:
            raise TypeError(f"no plot rule for result {name!r} of type {type(value)!r}")
        written += [png, csvp]
    return written
