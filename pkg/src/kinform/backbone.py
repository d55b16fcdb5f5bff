"""Siamese face-embedding backbone with an angular-margin identity head.

The residual trunk mirrors the 20-layer Sphereface layout: each stage opens
with a stride-2 3x3 convolution followed by residual units of two 3x3
convolutions, then FC-1 produces the embedding and FC-2 scores identities.
Both siamese branches call the same ``Backbone`` object, so weights are shared
by construction.

In embedding-input mode the convolutional trunk is skipped and FC-1 maps a
precomputed feature vector to the embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .autograd import Tensor, ops
from .autograd.tensor import ShapeError
from .data.kinship import ImageRecord

FULL_WIDTHS = (64, 128, 256, 512)
FULL_UNITS = (1, 2, 4, 1)
FULL_IDENTITIES = 10676


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "tiny"
    input_size: int = 12
    in_channels: int = 3
    widths: tuple = (4, 8)
    units: tuple = (1, 1)
    embed_dim: int = 16
    n_identities: int = 3
    input_mode: str = "pixels"
    input_dim: int = 0
    margin: int = 4

    @classmethod
    def full(cls, **overrides) -> "BackboneConfig":
        base = cls(variant="full", input_size=108, widths=FULL_WIDTHS, units=FULL_UNITS,
                   embed_dim=512, n_identities=FULL_IDENTITIES)
        return replace(base, **overrides)

    @classmethod
    def tiny(cls, **overrides) -> "BackboneConfig":
        return replace(cls(), **overrides)

    @classmethod
    def for_embeddings(cls, input_dim: int, embed_dim: int = 16, n_identities: int = 3, **overrides) -> "BackboneConfig":
        return replace(cls(input_mode="embedding", input_dim=input_dim, embed_dim=embed_dim,
                           n_identities=n_identities), **overrides)

    def validate(self) -> None:
        if self.variant not in ("full", "tiny"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.input_mode not in ("pixels", "embedding"):
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if len(self.widths) != len(self.units):
            raise ValueError("widths and units must have one entry per stage")
        if self.input_mode == "embedding" and self.input_dim < 1:
            raise ValueError("embedding input mode needs input_dim")
        if self.margin < 1 or self.embed_dim < 1 or self.n_identities < 1:
            raise ValueError("margin, embed_dim and n_identities must be positive")
        if self.variant == "full" and (self.widths != FULL_WIDTHS or self.units != FULL_UNITS or self.embed_dim != 512):
            raise ValueError("the full-size variant has fixed widths, units and a 512-d embedding")

    def to_dict(self) -> dict:
        return asdict(self)

    def feature_side(self) -> int:
        side = self.input_size
        for _ in self.widths:
            side = ops.conv2d_output_size(side, 3, 2, 1)
        return side


def lambda_schedule(step: int, total_steps: int, start: float = 1500.0, end: float = 5.0) -> float:
    """Geometric annealing of the angular-margin mixing weight from start to end."""
    if total_steps <= 1:
        return end
    t = min(max(step / (total_steps - 1), 0.0), 1.0)
    return float(start * (end / start) ** t)


class Backbone:
    def __init__(self, config: BackboneConfig, seed: int = 0, init: str = "kaiming"):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        zeros = init == "zeros"
        if init not in ("kaiming", "zeros"):
            raise ValueError(f"unknown init {init!r}")

        def conv(name, cin, cout):
            std = np.sqrt(2.0 / (9 * cin))
            w = np.zeros((3, 3, cin, cout)) if zeros else rng.normal(0.0, std, (3, 3, cin, cout))
            self._add(f"{name}.w", w)
            self._add(f"{name}.b", np.zeros(cout))

        def fc(name, fan_in, fan_out, bias=True):
            bound = 1.0 / np.sqrt(fan_in)
            w = np.zeros((fan_in, fan_out)) if zeros else rng.uniform(-bound, bound, (fan_in, fan_out))
            self._add(f"{name}.w", w)
            if bias:
                self._add(f"{name}.b", np.zeros(fan_out))

        if config.input_mode == "pixels":
            cin = config.in_channels
            for s, (width, units) in enumerate(zip(config.widths, config.units), 1):
                conv(f"conv{s}.0", cin, width)
                for u in range(1, units + 1):
                    conv(f"conv{s}.{u}a", width, width)
                    conv(f"conv{s}.{u}b", width, width)
                cin = width
            flat = config.feature_side() ** 2 * cin
        else:
            flat = config.input_dim
        fc("fc1", flat, config.embed_dim)
        fc("fc2", config.embed_dim, config.n_identities, bias=False)

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    # -- forward ------------------------------------------------------------

    def prepare(self, images) -> Tensor:
        """Stack ImageRecords (or raw arrays) into the network's input tensor."""
        cfg = self.config
        if isinstance(images, Tensor):
            return images
        if isinstance(images, ImageRecord):
            images = [images]
        arrs = []
        for im in images:
            if isinstance(im, ImageRecord):
                im = im.embedding if cfg.input_mode == "embedding" else im.pixels
                if im is None:
                    raise ShapeError(f"image kind does not match backbone input mode {cfg.input_mode!r}")
            arrs.append(np.asarray(im))
        x = np.stack(arrs)
        if cfg.input_mode == "embedding":
            if x.ndim != 2 or x.shape[1] != cfg.input_dim:
                raise ShapeError(f"expected embeddings of length {cfg.input_dim}, got {x.shape[1:]}")
            return Tensor(x.astype(np.float64))
        want = (cfg.input_size, cfg.input_size, cfg.in_channels)
        if x.shape[1:] != want:
            raise ShapeError(f"expected images of shape {want}, got {x.shape[1:]}")
        if x.dtype == np.uint8:
            x = (x.astype(np.float64) - 127.5) / 128.0
        return Tensor(x)

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        cfg, p = self.config, self.params
        if cfg.input_mode == "pixels":
            h = x
            if trace is not None:
                trace.append(("input", h.shape[1:]))
            for s, units in enumerate(cfg.units, 1):
                h = ops.relu(ops.conv2d(h, p[f"conv{s}.0.w"], p[f"conv{s}.0.b"], stride=2, padding=1))
                for u in range(1, units + 1):
                    r = ops.relu(ops.conv2d(h, p[f"conv{s}.{u}a.w"], p[f"conv{s}.{u}a.b"]))
                    r = ops.relu(ops.conv2d(r, p[f"conv{s}.{u}b.w"], p[f"conv{s}.{u}b.b"]))
                    h = ops.add(h, r)
                if trace is not None:
                    trace.append((f"Conv{s}.x", h.shape[1:]))
            x = ops.reshape(h, (h.shape[0], -1))
        emb = ops.linear(x, p["fc1.w"], p["fc1.b"])
        if trace is not None:
            trace.append(("FC-1", emb.shape[1:]))
        return emb

    def embed(self, images) -> Tensor:
        """Embeddings ``(N, d)`` for a batch of images (FC-1 output)."""
        return self.forward(self.prepare(images))

    def shape_trace(self, images) -> list:
        trace: list = []
        emb = self.forward(self.prepare(images), trace)
        trace.append(("FC-2", self.identity_logits(emb).shape[1:]))
        return trace

    def identity_logits(self, emb: Tensor) -> Tensor:
        w = self.params["fc2.w"]
        if emb.ndim != 2 or emb.shape[1] != w.shape[0]:
            raise ShapeError(f"embedding {emb.shape} does not fit FC-2 {w.shape}")
        return ops.matmul(emb, w)

    def sphere_loss(self, emb: Tensor, labels, lam: float, m: Optional[int] = None, reduction: str = "mean") -> Tensor:
        return sphere_loss(emb, labels, self.params["fc2.w"], lam, self.config.margin if m is None else m, reduction)

    def parameters(self) -> list:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def sphere_loss(emb: Tensor, labels, weight: Tensor, lam: float, m: int = 4, reduction: str = "mean") -> Tensor:
    """A-Softmax cross-entropy with annealing weight ``lam``.

    Identity columns of ``weight`` are normalized to unit length; logits are
    ``|x| cos(theta_j)`` and the target logit becomes
    ``|x| (lam cos(theta_y) + psi(theta_y)) / (1 + lam)``.
    """
    if lam < 0:
        raise ValueError(f"annealing weight must be non-negative, got {lam}")
    lab = np.asarray(labels, dtype=np.intp)
    n, k = emb.shape[0], weight.shape[1]
    if lab.shape != (n,):
        raise ShapeError(f"labels {lab.shape} vs embeddings {emb.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"identity label out of range [0, {k})")
    raw = ops.matmul(emb, ops.normalize_columns(weight))
    norm = ops.row_norm(emb)
    cos = ops.row_scale(raw, ops.reciprocal(norm))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), lab] = 1.0 / (1.0 + lam)
    shift = ops.mul(Tensor(onehot), ops.sub(ops.margin_psi(cos, m), cos))
    logits = ops.add(raw, ops.row_scale(shift, norm))
    return ops.cross_entropy(logits, lab, reduction)
