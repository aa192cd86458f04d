"""Training loops for the estimator, the identifier, and the baseline classifier.

The estimator regresses normalized transform parameters with MSE; the
identifier is trained afterwards on pairs built with the frozen estimator,
with binary cross entropy; the classifier is plain 10-way cross entropy on
un-transformed images (no augmentation of any kind). All runs are seeded and
deterministic on one device, record a learning curve, and fail loudly on
divergence instead of returning garbage weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import data as dmod
from . import nets
from . import transforms as tf
from .data import ImageSet, PairBatch

LOSSES = ("mse", "bce", "cross_entropy")


class TrainingFailure(RuntimeError):
    """Divergence or a malformed stream; carries a diagnostic message."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    step_size: float = 1e-3
    seed: int = 0
    loss: str = "mse"
    eval_every: int = 50

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.eval_every) <= 0 or self.step_size <= 0:
            raise tf.ConfigurationError("all train config values must be positive")
        if self.loss not in LOSSES:
            raise tf.ConfigurationError(f"unknown loss: {self.loss!r}")


@dataclass
class LearningCurve:
    """Sampled (step, train_loss, eval_metric) records, steps strictly increasing."""

    points: list = field(default_factory=list)

    def append(self, step: int, loss: float, metric: float = math.nan) -> None:
        if self.points and step <= self.points[-1][0]:
            raise ValueError("curve steps must be strictly increasing")
        self.points.append((step, loss, metric))

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["step,train_loss,eval_metric"]
        lines += [f"{s},{l:.8g},{m:.8g}" for s, l, m in self.points]
        path.write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path: Path) -> "LearningCurve":
        curve = LearningCurve()
        for line in Path(path).read_text().splitlines()[1:]:
            s, l, m = line.split(",")
            curve.append(int(s), float(l), float(m))
        return curve


def _pair_forward(net: nn.Module, family: str, x_t: torch.Tensor, x_t1: torch.Tensor) -> torch.Tensor:
    if family == "factornet":
        return net(torch.cat([x_t, x_t1], dim=1))
    if family == "siamese":
        return net(x_t, x_t1)
    return net(x_t1)  # vanilla conditions on the post-transform image only


def _to_torch(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).float()


def _loss(kind: str, out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if kind == "mse":
        return F.mse_loss(out, target)
    if kind == "bce":
        return F.binary_cross_entropy_with_logits(out, target)
    return F.cross_entropy(out, target)


def _run(
    model: nets.TrainedModel,
    batches: Iterable,
    cfg: TrainConfig,
    make_loss: Callable,
    eval_fn: Optional[Callable] = None,
) -> LearningCurve:
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.step_size)
    curve = LearningCurve()
    model.net.train()
    step, since_record = 0, []
    for batch in batches:
        opt.zero_grad()
        loss = make_loss(batch)
        lval = float(loss.detach())
        if not math.isfinite(lval) or lval > 1e3:
            raise TrainingFailure(f"divergence at step {step}: loss = {lval}")
        loss.backward()
        opt.step()
        step += 1
        since_record.append(lval)
        if step % cfg.eval_every == 0:
            metric = math.nan
            if eval_fn is not None:
                model.net.eval()
                metric = float(eval_fn(model))
                model.net.train()
            curve.append(step, float(np.mean(since_record)), metric)
            since_record = []
    if since_record:
        curve.append(step, float(np.mean(since_record)))
    if not curve.points:
        raise TrainingFailure("empty training stream")
    model.net.eval()
    model.training_meta["final_loss"] = curve.points[-1][1]
    model.training_meta["steps"] = step
    return curve


def train_estimator(
    spec: nets.ModelSpec,
    stream: Iterable[PairBatch],
    cfg: TrainConfig,
    *,
    train_source: str = "unspecified",
    eval_fn: Optional[Callable] = None,
    checkpoint_path: Optional[Path] = None,
) -> tuple[nets.TrainedModel, LearningCurve]:
    """Fit a transform-parameter regressor with MSE over a causal-pair stream."""
    if spec.kind not in tf.MECHANISMS:
        raise tf.ConfigurationError(f"estimator kind must be a mechanism, got {spec.kind!r}")
    if cfg.loss != "mse":
        raise tf.ConfigurationError("estimators train with the mse loss")
    torch.manual_seed(cfg.seed)
    model = nets.build_backbone(spec)
    model.training_meta = {"seed": cfg.seed, "epochs": cfg.epochs, "train_source": train_source}

    def make_loss(batch: PairBatch) -> torch.Tensor:
        out = _pair_forward(
            model.net, spec.family, _to_torch(batch.x_t), _to_torch(batch.x_t1)
        )
        return _loss("mse", out, torch.from_numpy(batch.target).float())

    curve = _run(model, stream, cfg, make_loss, eval_fn)
    if checkpoint_path is not None:
        nets.save_checkpoint(model, checkpoint_path)
    return model, curve


def train_identifier(
    spec: nets.ModelSpec,
    estimator: nets.TrainedModel,
    stream: Iterable[PairBatch],
    cfg: TrainConfig,
    *,
    train_source: str = "unspecified",
    eval_fn: Optional[Callable] = None,
    checkpoint_path: Optional[Path] = None,
) -> tuple[nets.TrainedModel, LearningCurve]:
    """Fit the same-content identifier on pairs built with a frozen estimator.

    The estimator only generates data (through no-grad prediction) and is
    never part of the optimized graph; a balance guard rejects degenerate
    label streams early.
    """
    if spec.kind != nets.IDENTITY:
        raise tf.ConfigurationError(f"identifier spec must have identity kind, got {spec.kind!r}")
    if estimator.spec.kind not in tf.MECHANISMS:
        raise tf.ConfigurationError(
            f"identifier needs a mechanism estimator, got {estimator.spec.kind!r}"
        )
    if cfg.loss != "bce":
        raise tf.ConfigurationError("identifiers train with the bce loss")
    torch.manual_seed(cfg.seed)
    model = nets.build_backbone(spec)
    model.training_meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "train_source": train_source,
        "estimator_kind": estimator.spec.kind,
    }

    seen_labels: list[float] = []
    balance_checked = False

    def make_loss(batch: PairBatch) -> torch.Tensor:
        nonlocal balance_checked
        if not balance_checked:
            seen_labels.extend(batch.target.ravel().tolist())
            if len(seen_labels) >= 512:
                mean = float(np.mean(seen_labels))
                if abs(mean - 0.5) > 0.2:
                    raise TrainingFailure(
                        f"identity labels unbalanced (mean {mean:.3f}); refusing to train"
                    )
                balance_checked = True
        out = _pair_forward(
            model.net, spec.family, _to_torch(batch.x_t), _to_torch(batch.x_t1)
        )
        return _loss("bce", out, torch.from_numpy(batch.target).float())

    curve = _run(model, stream, cfg, make_loss, eval_fn)
    if checkpoint_path is not None:
        nets.save_checkpoint(model, checkpoint_path)
    return model, curve


_CLASSIFIER_SOURCES = ("mnist_train", "standin_mnist_train")


def train_classifier(
    train_set: ImageSet,
    cfg: TrainConfig,
    *,
    experiment: str = dmod.EXP_MNIST,
    curve_path: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
) -> nets.TrainedModel:
    """10-way softmax classifier on un-transformed train images.

    Refuses anything that is not the plain train split: augmentation would
    break the covariate-shift experiment downstream.
    """
    if train_set.source not in _CLASSIFIER_SOURCES:
        raise tf.ConfigurationError(
            f"classifier trains on the un-transformed train split, got {train_set.source!r}"
        )
    if train_set.class_labels is None:
        raise tf.ConfigurationError("classifier needs labeled images")
    if cfg.loss != "cross_entropy":
        raise tf.ConfigurationError("the classifier trains with cross entropy")
    torch.manual_seed(cfg.seed)
    spec = nets.ModelSpec("vanilla", experiment, nets.CLASSIFY)
    model = nets.build_backbone(spec)
    model.training_meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "train_source": train_set.source,
    }

    images, labels = train_set.images, train_set.class_labels.astype(np.int64)
    rng = np.random.default_rng(cfg.seed)

    def batches():
        for _ in range(cfg.epochs):
            order = rng.permutation(len(images))
            for i in range(0, len(order), cfg.batch_size):
                j = order[i : i + cfg.batch_size]
                yield images[j], labels[j]

    def make_loss(batch) -> torch.Tensor:
        x, y = batch
        return _loss("cross_entropy", model.net(_to_torch(x)), torch.from_numpy(y))

    curve = _run(model, batches(), cfg, make_loss)
    if curve_path is not None:
        curve.save(curve_path)
    if checkpoint_path is not None:
        nets.save_checkpoint(model, checkpoint_path)
    return model


# ---------------------------------------------------------------------------
# finite-difference gradient probe (numerical-core check)


def gradient_probe(
    spec: nets.ModelSpec,
    batch: PairBatch,
    loss_kind: str,
    n_probe: int = 10,
    eps: float = 1e-5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic vs central-difference gradients on randomly probed weights.

    Runs in float64 with batchnorm in eval mode so the finite differences are
    clean. All parameters get a small random jitter first: at the exact
    initialization the zero batchnorm shifts leave large exactly-zero
    activation plateaus whose pooling ties put the loss on a kink, where
    one-sided autograd and central differences legitimately disagree.
    Returns (analytic, numeric) arrays of length n_probe.
    """
    torch.manual_seed(seed)
    model = nets.build_backbone(spec)
    net = model.net.double().eval()
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.empty_like(p).uniform_(-0.01, 0.01, generator=gen))

    x_t = torch.from_numpy(batch.x_t.transpose(0, 3, 1, 2)).double()
    x_t1 = torch.from_numpy(batch.x_t1.transpose(0, 3, 1, 2)).double()
    if loss_kind == "cross_entropy":
        target = torch.from_numpy(batch.target.ravel()).long()
    else:
        target = torch.from_numpy(batch.target).double()

    def loss_value() -> torch.Tensor:
        out = _pair_forward(net, spec.family, x_t, x_t1)
        return _loss(loss_kind, out, target)

    loss = loss_value()
    grads = torch.autograd.grad(loss, [p for p in net.parameters() if p.requires_grad])
    params = [p for p in net.parameters() if p.requires_grad]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    analytic, numeric = [], []
    with torch.no_grad():
        for _ in range(n_probe):
            pi = int(rng.integers(0, len(params)))
            wi = int(rng.integers(0, sizes[pi]))
            flat = params[pi].view(-1)
            orig = float(flat[wi])
            flat[wi] = orig + eps
            hi = float(loss_value())
            flat[wi] = orig - eps
            lo = float(loss_value())
            flat[wi] = orig
            numeric.append((hi - lo) / (2 * eps))
            analytic.append(float(grads[pi].view(-1)[wi]))
    return np.array(analytic), np.array(numeric)
