"""Dataset ingestion and causal-pair manufacture.

Sources (MNIST, EMNIST letters, CIFAR-10, Bernoulli noise) are decoded to
float32 arrays in [0,1], then turned into the two kinds of supervised streams
the models consume:

* transform pairs: x_t = f_T(x_0, params0), x_t1 = f_T(x_t, params), with the
  normalized `params` as regression target. The pre-transform by params0
  prevents the networks from reading the parameter off a canonical pose.
* identity pairs: (f_T(x, params), f_I(...)) with a binary same-content label,
  built with a frozen estimator supplying the parameter estimate.

Experiment streams follow the three train/test schemes:
Exp_MNIST (MNIST train / EMNIST letters test), Exp_CIFAR (9 CIFAR classes /
the heldout class), Exp_NOISE (Bernoulli noise / MNIST test).

When raw files are missing and unreachable, loaders fall back to the
synthetic stand-in corpora in :mod:`mechknow.synth` so everything stays
runnable offline; the ImageSet.source field then carries a "standin_" prefix.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import tarfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import synth
from . import transforms as tf

logger = logging.getLogger("mechknow.data")

EXP_MNIST = "Exp_MNIST"
EXP_CIFAR = "Exp_CIFAR"
EXP_NOISE = "Exp_NOISE"
EXPERIMENTS = (EXP_MNIST, EXP_CIFAR, EXP_NOISE)

SOURCES = (
    "mnist_train",
    "mnist_test",
    "emnist_letters_test",
    "cifar10_train_9cls",
    "cifar10_train_heldout",
    "noise",
)

DEFAULT_CACHE = Path(os.environ.get("MECHKNOW_CACHE", "~/.cache/mechknow")).expanduser()

# classic distribution files and the mirrors we try, overridable per call
MIRRORS: dict[str, list[str]] = {
    "train-images-idx3-ubyte.gz": [
        "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
        "https://storage.googleapis.com/cvdf-datasets/mnist/train-images-idx3-ubyte.gz",
    ],
    "train-labels-idx1-ubyte.gz": [
        "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
        "https://storage.googleapis.com/cvdf-datasets/mnist/train-labels-idx1-ubyte.gz",
    ],
    "t10k-images-idx3-ubyte.gz": [
        "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
        "https://storage.googleapis.com/cvdf-datasets/mnist/t10k-images-idx3-ubyte.gz",
    ],
    "t10k-labels-idx1-ubyte.gz": [
        "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
        "https://storage.googleapis.com/cvdf-datasets/mnist/t10k-labels-idx1-ubyte.gz",
    ],
    "emnist-letters-test-images-idx3-ubyte.gz": [
        "https://biometrics.nist.gov/cs_links/EMNIST/gzip.zip",
    ],
    "emnist-letters-test-labels-idx1-ubyte.gz": [
        "https://biometrics.nist.gov/cs_links/EMNIST/gzip.zip",
    ],
    "cifar-10-binary.tar.gz": [
        "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
    ],
}

_SOURCE_FILES = {
    "mnist_train": ["train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"],
    "mnist_test": ["t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"],
    "emnist_letters_test": [
        "emnist-letters-test-images-idx3-ubyte.gz",
        "emnist-letters-test-labels-idx1-ubyte.gz",
    ],
    "cifar10_train_9cls": ["cifar-10-binary.tar.gz"],
    "cifar10_train_heldout": ["cifar-10-binary.tar.gz"],
}

# desk-scale stand-in corpus sizes; the real datasets are used when present
STANDIN_SIZES = {
    "mnist_train": 6000,
    "mnist_test": 1500,
    "emnist_letters_test": 1500,
    "cifar10_train": 5000,
}
_STANDIN_SEEDS = {
    "mnist_train": 1101,
    "mnist_test": 2202,
    "emnist_letters_test": 3303,
    "cifar10_train": 4404,
}


class IngestionError(RuntimeError):
    """Raw data file missing or malformed."""


class IntegrityError(RuntimeError):
    """Cached file does not match its recorded content hash."""


@dataclass
class ImageSet:
    """A batch of images (N, H, W, C) float32 in [0,1] plus optional labels."""

    images: np.ndarray
    source: str
    class_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N,H,W,C), got {self.images.shape}")
        if self.class_labels is not None and len(self.class_labels) != len(self.images):
            raise ValueError("labels length mismatch")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class CausalPair:
    x_t: np.ndarray
    x_t1: np.ndarray
    target: np.ndarray  # normalized params, shape (d,)
    kind: str


@dataclass
class IdentityPair:
    x_t: np.ndarray
    x_t1: np.ndarray
    label: int  # 1 = same content, 0 = different


@dataclass
class PairBatch:
    """A batch of causal pairs in array form (what the training loops eat)."""

    x_t: np.ndarray  # (B,H,W,C)
    x_t1: np.ndarray
    target: np.ndarray  # (B,d) for transforms, (B,1) float labels for identity
    kind: str

    def __len__(self) -> int:
        return len(self.x_t)


# ---------------------------------------------------------------------------
# raw format parsing


def _read_idx(path: Path) -> np.ndarray:
    op = gzip.open if path.suffix == ".gz" else open
    try:
        with op(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    if len(data) < 4:
        raise IngestionError(f"truncated IDX file: {path}")
    magic = int.from_bytes(data[:4], "big")
    if magic == 0x00000803:  # images: count, rows, cols
        n, h, w = (int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(3))
        want = 16 + n * h * w
        if len(data) < want:
            raise IngestionError(f"IDX payload shorter than header claims: {path}")
        arr = np.frombuffer(data, dtype=np.uint8, count=n * h * w, offset=16)
        return arr.reshape(n, h, w)
    if magic == 0x00000801:  # labels
        n = int.from_bytes(data[4:8], "big")
        if len(data) < 8 + n:
            raise IngestionError(f"IDX payload shorter than header claims: {path}")
        return np.frombuffer(data, dtype=np.uint8, count=n, offset=8)
    raise IngestionError(f"unrecognized IDX magic 0x{magic:08x} in {path}")


def _find_idx(cache_dir: Path, gz_name: str) -> Path:
    for cand in (cache_dir / gz_name, cache_dir / gz_name[: -len(".gz")]):
        if cand.exists():
            return cand
    raise IngestionError(f"missing raw file: {cache_dir / gz_name}")


def _read_cifar_train(cache_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    """All five CIFAR-10 train batches -> images (50000,32,32,3), labels."""
    bin_dir = cache_dir / "cifar-10-batches-bin"
    if not bin_dir.exists():
        tgz = cache_dir / "cifar-10-binary.tar.gz"
        if not tgz.exists():
            raise IngestionError(f"missing raw file: {tgz}")
        with tarfile.open(tgz, "r:gz") as tar:
            tar.extractall(cache_dir)
    xs, ys = [], []
    for i in range(1, 6):
        p = bin_dir / f"data_batch_{i}.bin"
        if not p.exists():
            raise IngestionError(f"missing raw file: {p}")
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % 3073 != 0:
            raise IngestionError(f"malformed CIFAR batch (size {raw.size}): {p}")
        rec = raw.reshape(-1, 3073)
        ys.append(rec[:, 0])
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return np.concatenate(xs), np.concatenate(ys)


def load_source_dataset(source: str, cache_dir: Path, heldout_class: int = 9) -> ImageSet:
    """Decode one raw source to an ImageSet. Raises IngestionError if absent.

    EMNIST images are stored transposed relative to MNIST; we transpose them
    back so letters and digits share one canonical frame.
    """
    cache_dir = Path(cache_dir)
    if source == "noise":
        raise IngestionError("noise images are generated, not loaded")
    if source not in SOURCES:
        raise tf.ConfigurationError(f"unknown source: {source!r}")

    dec = cache_dir / "decoded"
    tag = source if not source.startswith("cifar") else f"{source}-h{heldout_class}"
    img_npy, lab_npy = dec / f"{tag}-images.npy", dec / f"{tag}-labels.npy"
    if img_npy.exists() and lab_npy.exists():
        return ImageSet(np.load(img_npy), source, np.load(lab_npy))

    if source in ("mnist_train", "mnist_test", "emnist_letters_test"):
        img_f, lab_f = _SOURCE_FILES[source]
        images = _read_idx(_find_idx(cache_dir, img_f))
        labels = _read_idx(_find_idx(cache_dir, lab_f)).astype(np.int64)
        if source == "emnist_letters_test":
            images = images.transpose(0, 2, 1)
        x = (images.astype(np.float32) / 255.0)[..., None]
    else:
        raw_x, raw_y = _read_cifar_train(cache_dir)
        if not 0 <= heldout_class <= 9:
            raise tf.ConfigurationError(f"heldout class out of range: {heldout_class}")
        keep = raw_y != heldout_class if source == "cifar10_train_9cls" else raw_y == heldout_class
        x = raw_x[keep].astype(np.float32) / 255.0
        labels = raw_y[keep].astype(np.int64)

    dec.mkdir(parents=True, exist_ok=True)
    np.save(img_npy, x)
    np.save(lab_npy, labels)
    return ImageSet(x, source, labels)


# ---------------------------------------------------------------------------
# fetching with recorded content hashes


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_manifest(cache_dir: Path) -> dict:
    p = cache_dir / "hashes.json"
    return json.loads(p.read_text()) if p.exists() else {}


def _record_hash(cache_dir: Path, name: str, digest: str) -> None:
    manifest = _hash_manifest(cache_dir)
    manifest[name] = digest
    (cache_dir / "hashes.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def fetch_data(
    sources: Sequence[str], cache_dir: Path = DEFAULT_CACHE, mirrors: Optional[dict] = None
) -> dict:
    """Ensure raw files for `sources` exist in the cache with verified hashes.

    Hashes are recorded on first sight and enforced afterwards. Pre-placed
    files count; no network is touched for files already present.
    Returns a {filename: status} report.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    mirrors = {**MIRRORS, **(mirrors or {})}
    manifest = _hash_manifest(cache_dir)
    report = {}
    for source in sources:
        if source == "noise":
            report["noise"] = "generated on demand"
            continue
        for fname in _SOURCE_FILES.get(source, []):
            dest = cache_dir / fname
            if dest.exists():
                digest = _sha256(dest)
                if fname in manifest and manifest[fname] != digest:
                    raise IntegrityError(
                        f"{dest} hash {digest[:12]} != recorded {manifest[fname][:12]}"
                    )
                if fname not in manifest:
                    _record_hash(cache_dir, fname, digest)
                report[fname] = "present"
                continue
            last_err: Exception | None = None
            for url in mirrors.get(fname, []):
                try:
                    logger.info("fetching %s", url)
                    with urllib.request.urlopen(url, timeout=60) as resp:
                        tmp = dest.with_suffix(dest.suffix + ".part")
                        tmp.write_bytes(resp.read())
                    tmp.rename(dest)
                    digest = _sha256(dest)
                    if fname in manifest and manifest[fname] != digest:
                        dest.unlink()
                        raise IntegrityError(
                            f"{fname} from {url}: hash {digest[:12]} != recorded"
                        )
                    _record_hash(cache_dir, fname, digest)
                    report[fname] = f"downloaded from {url}"
                    break
                except IntegrityError:
                    raise
                except Exception as e:  # noqa: BLE001 - report per-mirror failures
                    last_err = e
            else:
                report[fname] = f"unavailable ({last_err})"
    return report


# ---------------------------------------------------------------------------
# generated sources and stand-ins


def generate_noise_images(
    count: int,
    shape: tuple[int, int, int] = (28, 28, 1),
    p_black: float = 0.5,
    rng: Optional[np.random.Generator] = None,
) -> ImageSet:
    """Bernoulli black/white images: pixel = 0 w.p. p_black, else 1."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if not 0.0 <= p_black <= 1.0:
        raise ValueError(f"p_black must be in [0,1], got {p_black}")
    rng = rng if rng is not None else np.random.default_rng()
    x = (rng.random((count, *shape)) >= p_black).astype(np.float32)
    return ImageSet(x, "noise")


def invert_images(s: ImageSet) -> ImageSet:
    """Pixel-value swap (x -> 1-x), e.g. MNIST_b from MNIST."""
    return ImageSet(1.0 - s.images, s.source + "_b", s.class_labels)


def _standin(name: str, cache_dir: Path, heldout_class: int) -> ImageSet:
    sizes, seeds = STANDIN_SIZES, _STANDIN_SEEDS
    key = "cifar10_train" if name.startswith("cifar") else name
    n = sizes[key]
    sd = cache_dir / "standin"
    sd.mkdir(parents=True, exist_ok=True)
    stem = sd / f"{key}-{n}-{seeds[key]}"
    if (stem.with_suffix(".x.npy")).exists():
        x, y = np.load(stem.with_suffix(".x.npy")), np.load(stem.with_suffix(".y.npy"))
    else:
        logger.warning("raw %s unavailable; generating synthetic stand-in (%d images)", key, n)
        if key == "mnist_train" or key == "mnist_test":
            x, y = synth.make_digit_corpus(n, seed=seeds[key])
        elif key == "emnist_letters_test":
            x, y = synth.make_letter_corpus(n, seed=seeds[key])
        else:
            x, y = synth.make_texture_corpus(n, seed=seeds[key])
        np.save(stem.with_suffix(".x.npy"), x)
        np.save(stem.with_suffix(".y.npy"), y)
    if name == "cifar10_train_9cls":
        keep = y != heldout_class
        x, y = x[keep], y[keep]
    elif name == "cifar10_train_heldout":
        keep = y == heldout_class
        x, y = x[keep], y[keep]
    return ImageSet(x, f"standin_{name}", y)


def get_image_set(
    name: str,
    cache_dir: Path = DEFAULT_CACHE,
    *,
    heldout_class: int = 9,
    limit: Optional[int] = None,
    allow_standin: bool = True,
) -> ImageSet:
    """Load a named source, falling back to the synthetic stand-in corpus.

    `limit` truncates deterministically (first N images) for desk-scale runs.
    """
    cache_dir = Path(cache_dir)
    try:
        s = load_source_dataset(name, cache_dir, heldout_class)
    except IngestionError:
        if not allow_standin:
            raise
        s = _standin(name, cache_dir, heldout_class)
    if limit is not None and limit < len(s):
        s = ImageSet(
            s.images[:limit],
            s.source,
            None if s.class_labels is None else s.class_labels[:limit],
        )
    return s


# ---------------------------------------------------------------------------
# causal pair manufacture


def make_transform_pair(
    x0: np.ndarray, kind: str, rng: np.random.Generator, pre_transform: bool = True
) -> CausalPair:
    """One causal pair: pre-transform x0, then apply the target transform.

    The pre-transform keeps dataset images from always sitting in canonical
    pose. pre_transform=False skips it and uses x0 directly as the before
    image. Note this frame-sized construction stamps the warp's zero fill
    into the image borders; that is invisible on dark-background sources
    but leaks the parameters outright for full-frame textures, which is why
    noise training streams use make_windowed_noise_batch instead.
    """
    if pre_transform:
        p0 = tf.sample_transform_params(kind, rng)
        x_t = tf.apply_affine(x0, p0)
    else:
        x_t = np.asarray(x0, dtype=np.float32)
    p1 = tf.sample_transform_params(kind, rng)
    x_t1 = tf.apply_affine(x_t, p1)
    return CausalPair(x_t, x_t1, tf.normalize_params(p1), kind)


def make_transform_batch(
    x0: np.ndarray, kind: str, rng: np.random.Generator, pre_transform: bool = True
) -> PairBatch:
    """Vectorized make_transform_pair over a stack of source images."""
    if pre_transform:
        p0 = [tf.sample_transform_params(kind, rng) for _ in range(len(x0))]
        x_t = tf.apply_affine_batch(x0, p0)
    else:
        x_t = np.asarray(x0, dtype=np.float32)
    p1 = [tf.sample_transform_params(kind, rng) for _ in range(len(x0))]
    x_t1 = tf.apply_affine_batch(x_t, p1)
    target = np.stack([tf.normalize_params(p) for p in p1]).astype(np.float32)
    return PairBatch(x_t, x_t1, target, kind)


# Padding (px) that keeps every window pixel inside real field content for
# the worst-case parameters of each mechanism. Rotation: window corner radius
# sqrt(2)*13.5 stays put; translation: +-5 px; scaling: 0.7 zoom-out pulls the
# corner out to 19.1/0.7 px; joint compounds all three.
# Pad per mechanism so the warp's zero fill can never reach the central
# window, even through the pose-then-transform chain of two worst-case
# draws (window corner radius 19.1 px, per-step shrink to 0.7x, per-step
# shift of 5 px per axis).
_WINDOW_PAD = {tf.ROTATION: 8, tf.TRANSLATION: 11, tf.SCALING: 26, tf.JOINT: 51}


def window_pair_from_field(
    field: np.ndarray,
    params: list,
    size: int = 28,
    pre_params: Optional[list] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Warp a padded field and crop the central size x size window from both.

    The before view is the field (posed by pre_params when given) seen
    through the window; the after view warps that posed field by params, so
    fresh field content flows in at the window edges in place of the warp's
    zero fill and neither view carries a frame outline. The field must be
    big enough that the fill never reaches the window (see _WINDOW_PAD).
    """
    side = field.shape[1]
    if field.shape[2] != side or side < size:
        raise ValueError(f"field must be square and at least {size} px, got {field.shape}")
    pad = (side - size) // 2
    if size + 2 * pad != side:
        raise ValueError("field and window sizes must share a center pixel grid")
    if pre_params is not None:
        field = tf.apply_affine_batch(field, pre_params)
    warped = tf.apply_affine_batch(field, params)
    sl = slice(pad, pad + size)
    return (
        np.ascontiguousarray(field[:, sl, sl]),
        np.ascontiguousarray(warped[:, sl, sl]),
    )


def make_windowed_noise_batch(
    n: int,
    kind: str,
    rng: np.random.Generator,
    p_black: float = 0.5,
    size: int = 28,
) -> PairBatch:
    """Noise pairs seen through a fixed window onto a larger noise field.

    Two measures keep single-image giveaways out of these pairs:

    * Windowing. A plain warp of a 28x28 noise image stamps the frame
      outline into the after image, and that outline geometry alone pins
      down the transform parameters; an estimator trained on such pairs
      reads borders instead of texture and falls apart on dark-background
      images. Cropping both views out of a padded field replaces the zero
      fill with fresh texture.

    * Random pre-pose. The before view is itself a warped view of the
      field, drawn from the same parameter ranges, just as the
      dataset-backed streams pre-pose their source images. Without it the
      after view is the only resampled image in the pair and its
      interpolation texture alone (how smeared the binary speckle looks)
      tracks the target parameters; with it both views carry a random
      amount of that texture and only their relation identifies the target.

    Both views then come out of the same bilinear warp chain the evaluation
    pairs use, so the estimator never meets a rendering style it was not
    trained on.
    """
    pad = _WINDOW_PAD[kind]
    side = size + 2 * pad
    field = (rng.random((n, side, side, 1)) >= p_black).astype(np.float32)
    pre = [tf.sample_transform_params(kind, rng) for _ in range(n)]
    params = [tf.sample_transform_params(kind, rng) for _ in range(n)]
    x_t, x_t1 = window_pair_from_field(field, params, size, pre_params=pre)
    target = np.stack([tf.normalize_params(p) for p in params]).astype(np.float32)
    return PairBatch(x_t, x_t1, target, kind)


def make_identity_pair(
    x: np.ndarray,
    pool: ImageSet,
    estimator,
    rng: np.random.Generator,
    kind: str = tf.ROTATION,
) -> IdentityPair:
    """One identifier training pair.

    Draws a transform, builds x_t = f_T(x, params), estimates the params back
    with the frozen estimator, then builds x_t1 from x (label 1) or from a
    different pool image (label 0) using the estimate.
    """
    if len(pool) < 2:
        raise ValueError("pool must contain at least 2 images")
    p = tf.sample_transform_params(kind, rng)
    x_t = tf.apply_affine(x, p)
    label = int(rng.integers(0, 2))
    theta_hat = np.asarray(estimator.predict_pairs(x[None], x_t[None])[0], dtype=np.float64)
    if label == 1:
        x_t1 = tf.apply_affine(x, tf.denormalize_params(theta_hat, kind, strict=False))
    else:
        for _ in range(10):
            alt = pool.images[rng.integers(0, len(pool))]
            if not np.array_equal(alt, x):
                break
        else:
            raise ValueError("could not draw a distinct negative image from the pool")
        x_t1 = tf.apply_affine(alt, tf.denormalize_params(theta_hat, kind, strict=False))
    return IdentityPair(x_t, x_t1, label)


def make_identity_batch(
    idx: np.ndarray,
    pool_images: np.ndarray,
    estimator,
    rng: np.random.Generator,
    kind: str,
) -> PairBatch:
    """Batched identity pairs for images pool_images[idx].

    Negatives draw a pool index different from the positive's own index.
    Targets are float labels of shape (B,1).
    """
    xs = pool_images[idx]
    b, n = len(idx), len(pool_images)
    if n < 2:
        raise ValueError("pool must contain at least 2 images")
    params = [tf.sample_transform_params(kind, rng) for _ in range(b)]
    x_t = tf.apply_affine_batch(xs, params)
    labels = rng.integers(0, 2, size=b)
    theta_hat = np.asarray(estimator.predict_pairs(xs, x_t), dtype=np.float64)
    alt_idx = (idx + 1 + rng.integers(0, n - 1, size=b)) % n
    src = np.where(labels[:, None, None, None] == 1, xs, pool_images[alt_idx])
    recon_params = [
        tf.denormalize_params(theta_hat[i], kind, strict=False) for i in range(b)
    ]
    x_t1 = tf.apply_affine_batch(src, recon_params)
    return PairBatch(x_t, x_t1, labels.reshape(-1, 1).astype(np.float32), "identity")


# ---------------------------------------------------------------------------
# experiment streams (Exp_MNIST / Exp_CIFAR / Exp_NOISE)

_EXP_SOURCES = {
    (EXP_MNIST, "train"): "mnist_train",
    (EXP_MNIST, "test"): "emnist_letters_test",
    (EXP_CIFAR, "train"): "cifar10_train_9cls",
    (EXP_CIFAR, "test"): "cifar10_train_heldout",
    (EXP_NOISE, "train"): "noise",
    (EXP_NOISE, "test"): "mnist_test",
}


@dataclass
class StreamConfig:
    """Sizing knobs for build_experiment_stream."""

    epochs: int = 1
    pairs_per_epoch: int = 2048
    image_limit: Optional[int] = None
    p_black: float = 0.5
    heldout_class: int = 9
    noise_shape: tuple = (28, 28, 1)
    cache_dir: Path = field(default_factory=lambda: DEFAULT_CACHE)


def materialize_pairs(
    images: np.ndarray, n_pairs: int, kind: str, rng: np.random.Generator, chunk: int = 512
) -> PairBatch:
    """Fixed pair dataset drawn (with replacement) from a source image stack."""
    sel = rng.integers(0, len(images), size=n_pairs)
    parts = [make_transform_batch(images[sel[i : i + chunk]], kind, rng) for i in range(0, n_pairs, chunk)]
    return PairBatch(
        np.concatenate([p.x_t for p in parts]),
        np.concatenate([p.x_t1 for p in parts]),
        np.concatenate([p.target for p in parts]),
        kind,
    )


def iterate_fixed(pairs: PairBatch, batch_size: int, rng: np.random.Generator, epochs: int) -> Iterator[PairBatch]:
    n = len(pairs)
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            j = order[i : i + batch_size]
            yield PairBatch(pairs.x_t[j], pairs.x_t1[j], pairs.target[j], pairs.kind)


def build_experiment_stream(
    experiment: str,
    split: str,
    kind: str,
    batch_size: int,
    rng: np.random.Generator,
    cfg: Optional[StreamConfig] = None,
) -> Iterator[PairBatch]:
    """Batched causal-pair stream per the experiment table.

    Train streams run for cfg.epochs epochs of cfg.pairs_per_epoch pairs; the
    noise experiment regenerates fresh images every epoch (infinite-data
    regime) while image-backed experiments fix one pair set and reshuffle it,
    which is what lets a memorizing baseline stay strong in-domain. Test
    streams make a single pass. Noise pairs use the outline-free windowed
    construction; see make_windowed_noise_batch.
    """
    cfg = cfg or StreamConfig()
    if experiment not in EXPERIMENTS:
        raise tf.ConfigurationError(f"unknown experiment: {experiment!r}")
    if split not in ("train", "test"):
        raise tf.ConfigurationError(f"split must be train or test, got {split!r}")
    source = _EXP_SOURCES[(experiment, split)]

    if source == "noise":
        def gen() -> Iterator[PairBatch]:
            for _ in range(cfg.epochs):
                done = 0
                while done < cfg.pairs_per_epoch:
                    b = min(batch_size, cfg.pairs_per_epoch - done)
                    yield make_windowed_noise_batch(b, kind, rng, cfg.p_black)
                    done += b

        return gen()

    images = get_image_set(
        source, cfg.cache_dir, heldout_class=cfg.heldout_class, limit=cfg.image_limit
    ).images
    if split == "test":
        pairs = materialize_pairs(images, cfg.pairs_per_epoch, kind, rng)
        return iterate_fixed(pairs, batch_size, rng, epochs=1)
    pairs = materialize_pairs(images, cfg.pairs_per_epoch, kind, rng)
    return iterate_fixed(pairs, batch_size, rng, cfg.epochs)


def build_identity_stream(
    experiment: str,
    split: str,
    estimator,
    batch_size: int,
    rng: np.random.Generator,
    cfg: Optional[StreamConfig] = None,
    kind: str = tf.ROTATION,
) -> Iterator[PairBatch]:
    """Identity-pair stream mirroring build_experiment_stream's sourcing."""
    cfg = cfg or StreamConfig()
    source = _EXP_SOURCES.get((experiment, split))
    if source is None:
        raise tf.ConfigurationError(f"bad experiment/split: {experiment}/{split}")

    def gen() -> Iterator[PairBatch]:
        epochs = cfg.epochs if split == "train" else 1
        for ep in range(epochs):
            if source == "noise":
                images = generate_noise_images(
                    cfg.pairs_per_epoch, cfg.noise_shape, cfg.p_black, rng
                ).images
            else:
                s = get_image_set(
                    source, cfg.cache_dir, heldout_class=cfg.heldout_class, limit=cfg.image_limit
                )
                images = s.images
            sel = rng.integers(0, len(images), size=cfg.pairs_per_epoch)
            for i in range(0, len(sel), batch_size):
                yield make_identity_batch(sel[i : i + batch_size], images, estimator, rng, kind)

    return gen()
