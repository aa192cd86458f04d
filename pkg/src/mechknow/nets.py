"""Model families for transformation knowledge learning.

Three CNNs share one backbone stack and differ in how the causal pair enters:

* factornet: pre/post images concatenated along channels, one stack.
* siamese:   one shared-weight stack per image, features concatenated, two
             fully-connected layers on top.
* vanilla:   sees only the post-transform image (the conditioning ablation).

The backbone is four conv groups (conv+batchnorm+relu rows) each closed by a
3x3 stride-2 max pool, then the fully-connected head. Width profiles differ
between the 28x28 grayscale experiments and the 32x32 color one; joint
parameter learning widens every conv (x2 grayscale, x1.5 color).

The torch modules emit raw head outputs; the public predict methods on
TrainedModel squash identity scores through a logistic and classifier
outputs through a softmax.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import data
from . import transforms as tf

FAMILIES = ("factornet", "siamese", "vanilla")
IDENTITY = "identity"
CLASSIFY = "classify"
KINDS = tf.MECHANISMS + (IDENTITY, CLASSIFY)

CKPT_FORMAT = "mechknow-ckpt/1"

_GRAY_WIDTHS = (96, 64, 32, 32)  # first group + the repeated group width
_COLOR_WIDTHS = (192, 128, 64, 128)
_SIAMESE_HIDDEN = 64


def head_dim(kind: str) -> int:
    if kind in tf.PARAM_DIM:
        return tf.PARAM_DIM[kind]
    if kind == IDENTITY:
        return 1
    if kind == CLASSIFY:
        return 10
    raise tf.ConfigurationError(f"unknown kind: {kind!r}")


def _is_gray(experiment: str) -> bool:
    if experiment in (data.EXP_MNIST, data.EXP_NOISE):
        return True
    if experiment == data.EXP_CIFAR:
        return False
    raise tf.ConfigurationError(f"unknown experiment: {experiment!r}")


def layer_stack(experiment: str, kind: str) -> list[tuple]:
    """Ordered conv/pool descriptors: ("conv", k, out_ch, pad) / ("pool",)."""
    gray = _is_gray(experiment)
    c1, c2, c3, cr = _GRAY_WIDTHS if gray else _COLOR_WIDTHS
    mult = 1.0
    if kind == tf.JOINT:
        mult = 2.0 if gray else 1.5
    s = lambda c: int(round(c * mult))
    stack = [
        ("conv", 5, s(c1), 2),
        ("conv", 1, s(c2), 0),
        ("conv", 1, s(c3), 0),
        ("pool",),
    ]
    for first_k, first_pad in ((3, 1), (3, 1), (2, 0)):
        stack += [
            ("conv", first_k, s(cr), first_pad),
            ("conv", 1, s(cr), 0),
            ("conv", 1, s(cr), 0),
            ("pool",),
        ]
    return stack


@dataclass(frozen=True)
class ModelSpec:
    family: str
    experiment: str
    kind: str
    layer_stack: tuple = field(init=False)
    head_dim: int = field(init=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise tf.ConfigurationError(f"unknown family: {self.family!r}")
        if self.kind not in KINDS:
            raise tf.ConfigurationError(f"unknown kind: {self.kind!r}")
        if self.kind == IDENTITY and self.family != "factornet":
            raise tf.ConfigurationError("identity models use the factornet family")
        if self.kind == CLASSIFY and self.family != "vanilla":
            raise tf.ConfigurationError("the classifier is a single-image (vanilla) model")
        object.__setattr__(self, "layer_stack", tuple(layer_stack(self.experiment, self.kind)))
        object.__setattr__(self, "head_dim", head_dim(self.kind))

    @property
    def image_channels(self) -> int:
        return 1 if _is_gray(self.experiment) else 3

    @property
    def image_size(self) -> int:
        return 28 if _is_gray(self.experiment) else 32

    @property
    def pairwise(self) -> bool:
        """Whether the public forward consumes (x_t, x_t1) rather than one image."""
        return self.family in ("factornet", "siamese")

    def to_dict(self) -> dict:
        return {"family": self.family, "experiment": self.experiment, "kind": self.kind}

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(d["family"], d["experiment"], d["kind"])


class _InputNorm(nn.Module):
    """Per-sample, per-channel input standardization.

    The stacks see images from very different sources (dense binary noise,
    sparse digit strokes, color textures); removing each image's own mean
    and scale keeps the first-layer statistics comparable across domains,
    which matters because batchnorm running stats are frozen at eval time.
    Parameter-free, so checkpoints are unaffected.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(2, 3), keepdim=True)
        std = x.std(dim=(2, 3), keepdim=True)
        return (x - mean) / (std + 1e-5)


def _make_stack(descriptors, in_channels: int) -> nn.Sequential:
    layers: list[nn.Module] = [_InputNorm()]
    ch = in_channels
    for d in descriptors:
        if d[0] == "pool":
            layers.append(nn.MaxPool2d(3, stride=2, padding=1))
            continue
        _, k, out_ch, pad = d
        layers.append(nn.Conv2d(ch, out_ch, k, padding=pad, bias=False))
        layers.append(nn.BatchNorm2d(out_ch))
        layers.append(nn.ReLU(inplace=True))
        ch = out_ch
    return nn.Sequential(*layers)


def _flat_dim(stack: nn.Sequential, in_channels: int, size: int) -> int:
    with torch.no_grad():
        out = stack(torch.zeros(1, in_channels, size, size))
    return int(out.numel())


class _FactorNet(nn.Module):
    """Channel-concatenated pair through a single stack."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        in_ch = spec.image_channels * 2
        self.backbone = _make_stack(spec.layer_stack, in_ch)
        flat = _flat_dim(self.backbone, in_ch, spec.image_size)
        self.head = nn.Linear(flat, spec.head_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(torch.flatten(self.backbone(x), 1))


class _Siamese(nn.Module):
    """One shared stack per image; concatenated features; two FC layers."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        in_ch = spec.image_channels
        self.backbone = _make_stack(spec.layer_stack, in_ch)
        flat = _flat_dim(self.backbone, in_ch, spec.image_size)
        self.fc1 = nn.Linear(2 * flat, _SIAMESE_HIDDEN)
        self.relu = nn.ReLU(inplace=True)
        self.head = nn.Linear(_SIAMESE_HIDDEN, spec.head_dim)

    def forward(self, x_t: torch.Tensor, x_t1: torch.Tensor) -> torch.Tensor:
        a = torch.flatten(self.backbone(x_t), 1)
        b = torch.flatten(self.backbone(x_t1), 1)
        return self.head(self.relu(self.fc1(torch.cat([a, b], dim=1))))


class _Vanilla(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        in_ch = spec.image_channels
        self.backbone = _make_stack(spec.layer_stack, in_ch)
        flat = _flat_dim(self.backbone, in_ch, spec.image_size)
        self.head = nn.Linear(flat, spec.head_dim)

    def forward(self, x_t1: torch.Tensor) -> torch.Tensor:
        return self.head(torch.flatten(self.backbone(x_t1), 1))


def _init_weights(net: nn.Module) -> None:
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _to_torch(x: np.ndarray) -> torch.Tensor:
    if x.ndim != 4:
        raise ValueError(f"expected (N,H,W,C) images, got shape {x.shape}")
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).float()


@dataclass
class TrainedModel:
    """A model plus its spec and training provenance.

    training_meta records at least: seed, epochs, final_loss, train_source.
    Untrained models carry an empty meta.
    """

    spec: ModelSpec
    net: nn.Module
    training_meta: dict = field(default_factory=dict)

    def eval_mode(self) -> "TrainedModel":
        self.net.eval()
        return self

    def _post(self, out: torch.Tensor) -> np.ndarray:
        if self.spec.kind == IDENTITY:
            out = torch.sigmoid(out)
        elif self.spec.kind == CLASSIFY:
            out = torch.softmax(out, dim=1)
        return out.numpy()

    def predict_pairs(self, x_t: np.ndarray, x_t1: np.ndarray, batch: int = 256) -> np.ndarray:
        """Forward a batch of image pairs; (N, head_dim) numpy output."""
        if not self.spec.pairwise:
            raise ValueError(f"{self.spec.family} takes a single image, not a pair")
        if x_t.shape != x_t1.shape:
            raise ValueError(f"pair shape mismatch: {x_t.shape} vs {x_t1.shape}")
        a, b = _to_torch(x_t), _to_torch(x_t1)
        outs = []
        self.net.eval()
        with torch.no_grad():
            for i in range(0, len(a), batch):
                if self.spec.family == "factornet":
                    o = self.net(torch.cat([a[i : i + batch], b[i : i + batch]], dim=1))
                else:
                    o = self.net(a[i : i + batch], b[i : i + batch])
                outs.append(self._post(o))
        return np.concatenate(outs)

    def predict_images(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Forward single images (vanilla estimator or classifier)."""
        if self.spec.pairwise:
            raise ValueError(f"{self.spec.family}/{self.spec.kind} expects an image pair")
        t = _to_torch(x)
        outs = []
        self.net.eval()
        with torch.no_grad():
            for i in range(0, len(t), batch):
                outs.append(self._post(self.net(t[i : i + batch])))
        return np.concatenate(outs)


def build_backbone(spec: ModelSpec) -> TrainedModel:
    """Construct the untrained network for a spec."""
    if spec.family == "factornet":
        net: nn.Module = _FactorNet(spec)
    elif spec.family == "siamese":
        net = _Siamese(spec)
    else:
        net = _Vanilla(spec)
    _init_weights(net)
    return TrainedModel(spec, net)


def parameter_count(model: TrainedModel) -> int:
    return sum(p.numel() for p in model.net.parameters())


# ---------------------------------------------------------------------------
# checkpoints: a versioned zip of meta.json + one .npy per tensor (no pickle)


def save_checkpoint(model: TrainedModel, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.net.state_dict()
    meta = {
        "format": CKPT_FORMAT,
        "spec": model.spec.to_dict(),
        "training_meta": model.training_meta,
        "tensors": list(state.keys()),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as z:
        z.writestr("meta.json", json.dumps(meta, indent=2))
        for name, tensor in state.items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy())
            z.writestr(f"tensors/{name}.npy", buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: Path) -> TrainedModel:
    path = Path(path)
    with zipfile.ZipFile(path) as z:
        meta = json.loads(z.read("meta.json"))
        if meta.get("format") != CKPT_FORMAT:
            raise ValueError(f"unsupported checkpoint format in {path}: {meta.get('format')}")
        model = build_backbone(ModelSpec.from_dict(meta["spec"]))
        state = {}
        for name in meta["tensors"]:
            arr = np.load(io.BytesIO(z.read(f"tensors/{name}.npy")))
            state[name] = torch.from_numpy(arr)
        model.net.load_state_dict(state)
    model.training_meta = meta["training_meta"]
    model.net.eval()
    return model
