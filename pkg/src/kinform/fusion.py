"""Per-class kinship heads: element-wise side weighting, then embedding fusion.

The conv head stacks the two weighted embeddings as a length-``d`` map with two
channels and runs a cascade of kernel-size-1 convolutions over it, so every
embedding coordinate is processed by the same small channel mixer:

    input mix  2 -> C, ReLU
    conv1..8   C -> C, ReLU
    conv9      [input mix, conv8] (2C) -> 1, ReLU
    average over the d positions, add the reference offset, logistic.

ReLU on conv9 makes the pooled value non-negative, so the logistic needs a
learned offset (the reference logit of a two-class softmax) to express scores
below one half.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor, ops
from .autograd.tensor import ShapeError
from .data.kinship import KinshipClass

TIE_MODES = ("tied", "untied", "none")
FUSIONS = ("conv", "concat")
CONV9_BIAS_INIT = 1.0


@dataclass(frozen=True)
class HeadConfig:
    embed_dim: int = 16
    channels: int = 16
    hidden_layers: int = 8
    tie_mode: str = "untied"
    symmetric_mix: bool = False
    fusion: str = "conv"

    @classmethod
    def full(cls, **kw) -> "HeadConfig":
        return cls(embed_dim=512, channels=512, **kw)

    @classmethod
    def for_class(cls, kin: KinshipClass, weighting: str = "auto", **kw) -> "HeadConfig":
        """Default head for ``kin``: tied weights and order-symmetric mixing for symmetric classes."""
        if weighting == "auto":
            tie = "tied" if kin.symmetric else "untied"
        elif weighting in TIE_MODES:
            tie = weighting
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        return cls(tie_mode=tie, symmetric_mix=kin.symmetric, **kw)

    def validate(self) -> None:
        if self.tie_mode not in TIE_MODES:
            raise ValueError(f"tie_mode must be one of {TIE_MODES}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if min(self.embed_dim, self.channels) < 1 or self.hidden_layers < 0:
            raise ValueError("embed_dim and channels must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def conv_head_param_count(d: int, c: int, hidden: int = 8, tie_mode: str = "untied") -> int:
    """Closed-form parameter count of the conv fusion head."""
    weighting = {"tied": d, "untied": 2 * d, "none": 0}[tie_mode]
    return weighting + (2 * c + c) + hidden * (c * c + c) + (2 * c + 1) + 1


class FusionHead:
    def __init__(self, kin: KinshipClass, config: Optional[HeadConfig] = None, seed: int = 0, init: str = "kaiming"):
        config = config or HeadConfig.for_class(kin)
        config.validate()
        self.kin = kin
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        zeros = init == "zeros"
        d, c = config.embed_dim, config.channels

        if config.tie_mode == "tied":
            self._add("w", np.ones(d))
        elif config.tie_mode == "untied":
            self._add("w_phi", np.ones(d))
            self._add("w_psi", np.ones(d))

        def kernel(name, cin, cout):
            w = np.zeros((cin, cout)) if zeros else rng.normal(0.0, np.sqrt(2.0 / cin), (cin, cout))
            self._add(f"{name}.w", w)
            self._add(f"{name}.b", np.zeros(cout))

        if config.fusion == "conv":
            kernel("mix", 2, c)
            for i in range(1, config.hidden_layers + 1):
                kernel(f"conv{i}", c, c)
            kernel(f"conv{config.hidden_layers + 1}", 2 * c, 1)
            if not zeros:
                # start conv9 in its active region, balanced by the offset, so the
                # first BCE steps cannot push every pooled value into the dead zone
                self.params[f"conv{config.hidden_layers + 1}.b"].data[:] = CONV9_BIAS_INIT
            self._add("out.b", np.full(1, 0.0 if zeros else -CONV9_BIAS_INIT))
        else:
            bound = 1.0 / np.sqrt(2 * d)
            self._add("fc.w", np.zeros((2 * d, 1)) if zeros else rng.uniform(-bound, bound, (2 * d, 1)))
            self._add("fc.b", np.zeros(1))

    def _add(self, name, arr) -> None:
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    @property
    def w_phi(self) -> Optional[Tensor]:
        return self.params.get("w", self.params.get("w_phi"))

    @property
    def w_psi(self) -> Optional[Tensor]:
        return self.params.get("w", self.params.get("w_psi"))

    def parameters(self) -> list:
        return list(self.params.values())

    def n_parameters(self, include_weighting: bool = True) -> int:
        skip = () if include_weighting else ("w", "w_phi", "w_psi")
        return sum(t.size for n, t in self.params.items() if n not in skip)

    # -- forward ------------------------------------------------------------

    def apply_weighting(self, phi: Tensor, psi: Tensor) -> tuple:
        d = self.config.embed_dim
        if phi.shape != psi.shape or phi.shape[-1] != d:
            raise ShapeError(f"embeddings {phi.shape} / {psi.shape} do not match head dimension {d}")
        if self.config.tie_mode == "none":
            return phi, psi
        return ops.channel_scale(phi, self.w_phi), ops.channel_scale(psi, self.w_psi)

    def logit(self, phi: Tensor, psi: Tensor, trace: Optional[list] = None) -> Tensor:
        """Pre-logistic score ``(N,)`` of already-weighted embeddings ``(N, d)``."""
        p = self.params
        n, d = phi.shape
        if self.config.fusion == "concat":
            z = ops.linear(ops.concat([phi, psi], axis=1), p["fc.w"], p["fc.b"])
            return ops.reshape(z, (n,))
        a = ops.reshape(phi, (n, d, 1))
        b = ops.reshape(psi, (n, d, 1))
        x = ops.concat([a, b], axis=2)
        if trace is not None:
            trace.append(("input", x.shape[1:]))
        h0 = ops.relu(ops.conv1d_k1(x, p["mix.w"], p["mix.b"]))
        if self.config.symmetric_mix:
            swapped = ops.relu(ops.conv1d_k1(ops.concat([b, a], axis=2), p["mix.w"], p["mix.b"]))
            h0 = ops.scale(ops.add(h0, swapped), 0.5)
        if trace is not None:
            trace.append(("input mix", h0.shape[1:]))
        h = h0
        last = self.config.hidden_layers + 1
        for i in range(1, last):
            h = ops.relu(ops.conv1d_k1(h, p[f"conv{i}.w"], p[f"conv{i}.b"]))
            if trace is not None:
                trace.append((f"1D Conv{i}", h.shape[1:]))
        cat = ops.concat([h0, h], axis=2)
        o = ops.relu(ops.conv1d_k1(cat, p[f"conv{last}.w"], p[f"conv{last}.b"]))
        if trace is not None:
            trace.append((f"1D Conv{last} in", cat.shape[1:]))
            trace.append((f"1D Conv{last}", o.shape[1:]))
        pooled = ops.avg_pool_length(o)
        z = ops.linear(pooled, _ONE, p["out.b"])
        return ops.reshape(z, (n,))

    def score(self, phi: Tensor, psi: Tensor) -> Tensor:
        """Kinship probability ``(N,)`` for raw embeddings: weighting, fusion, logistic."""
        a, b = self.apply_weighting(phi, psi)
        return ops.sigmoid(self.logit(a, b))

    def shape_trace(self, phi: Tensor, psi: Tensor) -> list:
        trace: list = []
        a, b = self.apply_weighting(phi, psi)
        self.logit(a, b, trace)
        return trace


_ONE = Tensor(np.ones((1, 1)))


def apply_weighting(phi: Tensor, psi: Tensor, head: FusionHead) -> tuple:
    return head.apply_weighting(phi, psi)


def fuse_score(weighted: tuple, head: FusionHead) -> Tensor:
    """Probability for an already-weighted (phi, psi) pair through ``head``'s fusion."""
    return ops.sigmoid(head.logit(*weighted))


def bce_loss(score: Tensor, label, reduction: str = "mean") -> Tensor:
    y = np.asarray(label, dtype=float)
    if y.ndim == 0:
        y = np.full(score.shape, float(y))
    return ops.binary_cross_entropy(score, y, reduction)
