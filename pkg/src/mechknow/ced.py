"""Hypothesis-verification classification.

A stock classifier proposes likely class labels; when its confidence is below
threshold, each hypothesis is verified against stored un-transformed
candidates: the estimator reads the transform relating candidate and test
image, the candidate is re-rendered under that estimate, and the identifier
scores whether test image and reconstruction share content. The variants:

  C    classifier argmax only
  CED  hypothesize, then verify the top-k classes when unsure
  ED   verify all classes, never consulting the classifier's confidence
  CD   verification without the estimator (candidates compared as-is)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nets
from . import transforms as tf
from .data import ImageSet
from .transforms import ConfigurationError

VARIANTS = ("C", "CED", "ED", "CD")
DEFAULT_THRESHOLD = 0.9999
N_CLASSES = 10


@dataclass(frozen=True)
class Hypothesis:
    sample_id: int
    mode: str  # "direct" | "verify"
    classes: tuple  # ((label, confidence), ...) confidence non-increasing

    def __post_init__(self):
        if self.mode not in ("direct", "verify"):
            raise ValueError(f"bad mode {self.mode!r}")
        if not self.classes:
            raise ValueError("empty hypothesis")
        confs = [c for _, c in self.classes]
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise ValueError("confidences must be non-increasing")
        labels = [l for l, _ in self.classes]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels in hypothesis")
        if self.mode == "direct" and len(self.classes) != 1:
            raise ValueError("direct mode carries exactly one label")

    @property
    def labels(self) -> list:
        return [l for l, _ in self.classes]


@dataclass
class CandidatePool:
    by_class: dict  # label -> (N,H,W,C) images
    ids: dict  # label -> (N,) candidate ids into the source set
    n_per_class: int

    def __post_init__(self):
        for label, imgs in self.by_class.items():
            if len(imgs) != self.n_per_class or len(self.ids[label]) != self.n_per_class:
                raise ValueError(f"class {label}: expected {self.n_per_class} candidates")

    @property
    def labels(self) -> list:
        return sorted(self.by_class)

    def prefix(self, n: int) -> "CandidatePool":
        """First n candidates per class; nested subsets of the same draw."""
        if not 1 <= n <= self.n_per_class:
            raise ValueError(f"prefix size {n} out of range 1..{self.n_per_class}")
        return CandidatePool(
            {l: imgs[:n] for l, imgs in self.by_class.items()},
            {l: ids[:n] for l, ids in self.ids.items()},
            n,
        )


@dataclass
class Prediction:
    sample_id: int
    label: int
    mode: str
    candidate_id: Optional[int] = None
    theta_hat: Optional[np.ndarray] = None  # normalized units
    score: Optional[float] = None

    def __post_init__(self):
        verify_fields = (self.candidate_id, self.score)
        if self.mode == "verify" and any(v is None for v in verify_fields):
            raise ValueError("verify-mode prediction missing explanation fields")
        if self.mode == "direct" and any(v is not None for v in verify_fields):
            raise ValueError("direct-mode prediction carries verify fields")


@dataclass
class Components:
    """The trained pieces a variant may need, plus invocation counters."""

    classifier: Optional[nets.TrainedModel] = None
    estimator: Optional[nets.TrainedModel] = None
    identifier: Optional[nets.TrainedModel] = None
    pool: Optional[CandidatePool] = None
    counters: dict = field(
        default_factory=lambda: {"classifier": 0, "estimator": 0, "identifier": 0}
    )


def check_provenance(model: nets.TrainedModel, expected: str = "noise") -> None:
    got = model.training_meta.get("train_source")
    if got != expected:
        raise ConfigurationError(f"model trained on {got!r}, expected {expected!r}")


# ---------------------------------------------------------------------------
# hypothesis stage


def hypothesize_from_probs(
    probs: np.ndarray, k: int, threshold: float = DEFAULT_THRESHOLD, sample_id: int = 0
) -> Hypothesis:
    if not 1 < k <= N_CLASSES:
        raise ConfigurationError(f"k must be in 2..{N_CLASSES}, got {k}")
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must be in (0,1), got {threshold}")
    probs = np.asarray(probs, dtype=np.float64).ravel()
    order = np.argsort(-probs, kind="stable")  # ties resolve to lower label
    if probs[order[0]] >= threshold:
        top = int(order[0])
        return Hypothesis(sample_id, "direct", ((top, float(probs[top])),))
    picked = tuple((int(i), float(probs[i])) for i in order[:k])
    return Hypothesis(sample_id, "verify", picked)


def hypothesize(
    classifier: nets.TrainedModel,
    x: np.ndarray,
    k: int,
    threshold: float = DEFAULT_THRESHOLD,
    sample_id: int = 0,
) -> Hypothesis:
    probs = classifier.predict_images(x[None])[0]
    return hypothesize_from_probs(probs, k, threshold, sample_id)


# ---------------------------------------------------------------------------
# candidate pool


def sample_candidate_pool(train_set: ImageSet, n: int, rng: np.random.Generator) -> CandidatePool:
    """Uniform without-replacement draw of n candidates per class.

    Per class the full index permutation is drawn before truncation, so pools
    sampled from the same seed nest: pool(n) is a per-class prefix of
    pool(m) for n <= m.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if train_set.class_labels is None:
        raise ValueError("candidate pool needs a labeled image set")
    labels = np.asarray(train_set.class_labels)
    by_class, ids = {}, {}
    for label in sorted(set(int(v) for v in labels)):
        idx = np.flatnonzero(labels == label)
        if n > len(idx):
            raise ValueError(f"class {label} has only {len(idx)} images, need {n}")
        perm = idx[rng.permutation(len(idx))]
        ids[label] = perm[:n].copy()
        by_class[label] = train_set.images[ids[label]].copy()
    return CandidatePool(by_class, ids, n)


# ---------------------------------------------------------------------------
# verification stage


def _reconstruct(candidates: np.ndarray, theta: np.ndarray, kind: str) -> np.ndarray:
    params = [tf.denormalize_params(t, kind, strict=False) for t in theta]
    return tf.apply_affine_batch(candidates, params)


def _best_index(scores, labels, ids, idxs) -> int:
    """Highest score; exact ties go to the lowest class, then lowest id."""
    best, bkey = None, None
    for j in idxs:
        key = (-scores[j], labels[j], ids[j])
        if bkey is None or key < bkey:
            best, bkey = int(j), key
    return best


def verify(
    x: np.ndarray,
    hyp: Hypothesis,
    pool: CandidatePool,
    estimator: Optional[nets.TrainedModel],
    identifier: nets.TrainedModel,
    counters: Optional[dict] = None,
) -> Prediction:
    """Score every hypothesized candidate against x; global argmax wins.

    estimator=None drops the re-rendering step (candidates scored as-is);
    exact score ties resolve to the lowest class label, then the lowest
    candidate id.
    """
    if hyp.mode != "verify":
        raise ValueError("verify() needs a verify-mode hypothesis")
    missing = [l for l in hyp.labels if l not in pool.by_class]
    if missing:
        raise ConfigurationError(f"pool lacks candidates for classes {missing}")
    kind = estimator.spec.kind if estimator is not None else tf.ROTATION

    labels = sorted(hyp.labels)
    cand_imgs = np.concatenate([pool.by_class[l] for l in labels])
    cand_ids = np.concatenate([pool.ids[l] for l in labels])
    cand_labels = np.concatenate([[l] * pool.n_per_class for l in labels])
    x_rep = np.broadcast_to(x, (len(cand_imgs),) + x.shape)

    if estimator is None:
        theta = np.tile(tf.normalize_params(tf.identity_params(kind)), (len(cand_imgs), 1))
        recon = cand_imgs
    else:
        theta = estimator.predict_pairs(cand_imgs, x_rep)
        if counters is not None:
            counters["estimator"] += len(cand_imgs)
        recon = _reconstruct(cand_imgs, theta, kind)
    scores = identifier.predict_pairs(x_rep, recon).ravel()
    if counters is not None:
        counters["identifier"] += len(cand_imgs)

    best = _best_index(scores, cand_labels, cand_ids, range(len(scores)))
    return Prediction(
        sample_id=hyp.sample_id,
        label=int(cand_labels[best]),
        mode="verify",
        candidate_id=int(cand_ids[best]),
        theta_hat=np.asarray(theta[best], dtype=np.float64),
        score=float(scores[best]),
    )


# ---------------------------------------------------------------------------
# variants


def _require(comp: Components, variant: str, *names: str) -> None:
    missing = [n for n in names if getattr(comp, n) is None]
    if missing:
        raise ConfigurationError(f"variant {variant} needs components: {missing}")


def classify(
    variant: str,
    x: np.ndarray,
    comp: Components,
    k: int = 10,
    threshold: float = DEFAULT_THRESHOLD,
    n_candidates: Optional[int] = None,
    sample_id: int = 0,
) -> Prediction:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    pool = comp.pool
    if pool is not None and n_candidates is not None:
        pool = pool.prefix(n_candidates)

    if variant == "C":
        _require(comp, variant, "classifier")
        probs = comp.classifier.predict_images(x[None])[0]
        comp.counters["classifier"] += 1
        return Prediction(sample_id, int(np.argmax(probs)), "direct")

    if variant == "CED":
        _require(comp, variant, "classifier", "estimator", "identifier", "pool")
        hyp = hypothesize(comp.classifier, x, k, threshold, sample_id)
        comp.counters["classifier"] += 1
        if hyp.mode == "direct":
            return Prediction(sample_id, hyp.classes[0][0], "direct")
        return verify(x, hyp, pool, comp.estimator, comp.identifier, comp.counters)

    if variant == "ED":
        _require(comp, variant, "estimator", "identifier", "pool")
        conf = 1.0 / len(pool.labels)
        hyp = Hypothesis(sample_id, "verify", tuple((l, conf) for l in pool.labels))
        return verify(x, hyp, pool, comp.estimator, comp.identifier, comp.counters)

    # CD: hypothesize as CED would, then match raw candidates
    _require(comp, variant, "classifier", "identifier", "pool")
    hyp = hypothesize(comp.classifier, x, k, threshold, sample_id)
    comp.counters["classifier"] += 1
    if hyp.mode == "direct":
        return Prediction(sample_id, hyp.classes[0][0], "direct")
    return verify(x, hyp, pool, None, comp.identifier, comp.counters)


# ---------------------------------------------------------------------------
# end-to-end evaluation


@dataclass
class PipelineConfig:
    k: int = 10
    threshold: float = DEFAULT_THRESHOLD
    n_candidates: Optional[int] = None
    shift_kind: str = tf.ROTATION
    seed: int = 0
    limit: Optional[int] = None
    log_path: Optional[Path] = None


@dataclass
class PipelineResult:
    variant: str
    accuracy: float
    n_samples: int
    rotated: bool
    predictions: list


def _theta_payload(pred: Prediction, kind: str) -> Optional[dict]:
    if pred.theta_hat is None:
        return None
    p = tf.denormalize_params(pred.theta_hat, kind, strict=False)
    out = {}
    if kind in (tf.ROTATION, tf.JOINT):
        out["angle_deg"] = round(p.angle_deg, 4)
    if kind in (tf.TRANSLATION, tf.JOINT):
        out["tx_px"] = round(p.tx_px, 4)
        out["ty_px"] = round(p.ty_px, 4)
    if kind in (tf.SCALING, tf.JOINT):
        out["scale"] = round(p.scale, 4)
    return out


def evaluate_pipeline(
    variant: str,
    test_set: ImageSet,
    rotated: bool,
    comp: Components,
    cfg: Optional[PipelineConfig] = None,
) -> PipelineResult:
    """Top-1 accuracy over the test set plus a per-sample explanation log.

    With rotated=True every test image is warped by a freshly sampled
    transform of cfg.shift_kind before classification (the covariate-shift
    condition). Deterministic given cfg.seed.
    """
    cfg = cfg or PipelineConfig()
    if test_set.class_labels is None:
        raise ValueError("test set must be labeled")
    kind = comp.estimator.spec.kind if comp.estimator is not None else tf.ROTATION
    rng = np.random.default_rng(cfg.seed)
    n = len(test_set) if cfg.limit is None else min(cfg.limit, len(test_set))

    records, preds = [], []
    correct = 0
    for i in range(n):
        x = test_set.images[i]
        if rotated:
            x = tf.apply_affine(x, tf.sample_transform_params(cfg.shift_kind, rng))
        pred = classify(
            variant, x, comp, k=cfg.k, threshold=cfg.threshold,
            n_candidates=cfg.n_candidates, sample_id=i,
        )
        truth = int(test_set.class_labels[i])
        correct += int(pred.label == truth)
        preds.append(pred)
        records.append(
            {
                "sample": i,
                "truth": truth,
                "pred": pred.label,
                "mode": pred.mode,
                "candidate": pred.candidate_id,
                "theta": _theta_payload(pred, kind),
                "score": None if pred.score is None else round(pred.score, 6),
            }
        )
    if cfg.log_path is not None:
        path = Path(cfg.log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
    return PipelineResult(variant, correct / n, n, rotated, preds)


def candidate_sweep(
    ns: list,
    test_set: ImageSet,
    comp: Components,
    cfg: Optional[PipelineConfig] = None,
) -> dict:
    """CED accuracy at several candidate-pool sizes, sharing one seed.

    The score matrix is computed once per sample at max(ns) and sliced,
    which is exact because same-seed pools nest by construction. Results
    match evaluate_pipeline run separately at each n.
    """
    cfg = cfg or PipelineConfig()
    if list(ns) != sorted(ns) or len(ns) == 0:
        raise ValueError("ns must be non-empty and ascending")
    _require(comp, "CED", "classifier", "estimator", "identifier", "pool")
    n_max = max(ns)
    pool = comp.pool.prefix(n_max)
    if test_set.class_labels is None:
        raise ValueError("test set must be labeled")
    kind = comp.estimator.spec.kind
    rng = np.random.default_rng(cfg.seed)
    n_samples = len(test_set) if cfg.limit is None else min(cfg.limit, len(test_set))

    correct = {v: 0 for v in ns}
    for i in range(n_samples):
        x = tf.apply_affine(
            test_set.images[i], tf.sample_transform_params(cfg.shift_kind, rng)
        )
        truth = int(test_set.class_labels[i])
        hyp = hypothesize(comp.classifier, x, cfg.k, cfg.threshold, i)
        if hyp.mode == "direct":
            for v in ns:
                correct[v] += int(hyp.classes[0][0] == truth)
            continue
        labels = sorted(hyp.labels)
        cand_imgs = np.concatenate([pool.by_class[l] for l in labels])
        cand_ids = np.concatenate([pool.ids[l] for l in labels])
        cand_labels = np.concatenate([[l] * n_max for l in labels])
        x_rep = np.broadcast_to(x, (len(cand_imgs),) + x.shape)
        theta = comp.estimator.predict_pairs(cand_imgs, x_rep)
        recon = _reconstruct(cand_imgs, theta, kind)
        scores = comp.identifier.predict_pairs(x_rep, recon).ravel()
        within = np.arange(len(cand_imgs)) % n_max  # candidate rank in its class
        for v in ns:
            sub = np.flatnonzero(within < v)
            best = _best_index(scores, cand_labels, cand_ids, sub)
            correct[v] += int(cand_labels[best] == truth)
    return {v: correct[v] / n_samples for v in ns}
