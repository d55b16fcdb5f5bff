"""Finite-difference checks for every layer type, both losses and the whole tiny model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .autograd import GradCheckReport, Tensor, grad_check, ops
from .autograd.gradcheck import MAX_KINK_FRACTION
from .backbone import sphere_loss
from .data.kinship import TRAINED_CLASSES
from .seeding import derive_seed
from .training.config import TrainConfig
from .training.model import KinshipModel
from .training.trainer import Batch, total_loss


def _p(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _reduce(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.weighted_sum(out, w)


def _case(make: Callable) -> Callable:
    """Wrap ``make(rng) -> (forward, params)`` so the output is reduced by fixed random weights."""
    def build(rng):
        fwd, params = make(rng)
        probe = fwd()
        w = rng.normal(size=probe.shape) if probe.ndim else None

        def f():
            out = fwd()
            return out if w is None else _reduce(out, w)

        return f, params
    return build


def _unary(op, low=-1.0, high=1.0, shape=(3, 4)):
    def make(rng):
        x = _p(rng, *shape, low=low, high=high)
        return (lambda: op(x)), {"x": x}
    return make


def _linear(rng):
    x, w, b = _p(rng, 4, 5), _p(rng, 5, 3), _p(rng, 3)
    return (lambda: ops.linear(x, w, b)), {"x": x, "w": w, "b": b}


def _matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return (lambda: ops.matmul(a, b)), {"a": a, "b": b}


def _conv2d(stride):
    def make(rng):
        x, w, b = _p(rng, 2, 5, 5, 2), _p(rng, 3, 3, 2, 3), _p(rng, 3)
        return (lambda: ops.conv2d(x, w, b, stride=stride, padding=1)), {"x": x, "w": w, "b": b}
    return make


def _conv1d(rng):
    x, w, b = _p(rng, 2, 6, 3), _p(rng, 3, 4), _p(rng, 4)
    return (lambda: ops.conv1d_k1(x, w, b)), {"x": x, "w": w, "b": b}


def _binary(op):
    def make(rng):
        a, b = _p(rng, 3, 4), _p(rng, 3, 4)
        return (lambda: op(a, b)), {"a": a, "b": b}
    return make


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 2)
    return (lambda: ops.concat([a, b], axis=1)), {"a": a, "b": b}


def _take_rows(rng):
    x = _p(rng, 4, 3)
    idx = rng.integers(0, 4, size=6)
    return (lambda: ops.take_rows(x, idx)), {"x": x}


def _channel_scale(rng):
    x, w = _p(rng, 3, 5), _p(rng, 5)
    return (lambda: ops.channel_scale(x, w)), {"x": x, "w": w}


def _row_scale(rng):
    x, s = _p(rng, 3, 5), _p(rng, 3)
    return (lambda: ops.row_scale(x, s)), {"x": x, "s": s}


def _avg_pool(rng):
    x = _p(rng, 2, 6, 3)
    return (lambda: ops.avg_pool_length(x)), {"x": x}


def _margin_psi(rng):
    c = _p(rng, 3, 4, low=-0.95, high=0.95)
    m = int(rng.integers(1, 5))
    return (lambda: ops.margin_psi(c, m)), {"cos": c}


def _sphere(rng):
    n, d, k = 5, 4, 3
    emb, w = _p(rng, n, d), _p(rng, d, k)
    labels = rng.integers(0, k, n)
    lam = float(np.exp(rng.uniform(np.log(5), np.log(1500))))
    return (lambda: sphere_loss(emb, labels, w, lam, 4)), {"emb": emb, "fc2.w": w}


def _bce(rng):
    z = _p(rng, 6, low=-3, high=3)
    y = rng.integers(0, 2, 6).astype(float)
    return (lambda: ops.binary_cross_entropy(ops.sigmoid(z), y)), {"logit": z}


def _cross_entropy(rng):
    z = _p(rng, 4, 5, low=-2, high=2)
    y = rng.integers(0, 5, 4)
    return (lambda: ops.cross_entropy(z, y)), {"logits": z}


LAYER_CASES = {
    "add": _case(_binary(ops.add)),
    "sub": _case(_binary(ops.sub)),
    "mul": _case(_binary(ops.mul)),
    "scale": _case(_unary(lambda x: ops.scale(x, 1.7))),
    "add_scalar": _case(_unary(lambda x: ops.add_scalar(x, 0.3))),
    "reciprocal": _case(_unary(ops.reciprocal, 0.5, 2.0)),
    "relu": _case(_unary(ops.relu)),
    "sigmoid": _case(_unary(ops.sigmoid, -3, 3)),
    "softmax": _case(_unary(ops.softmax, -2, 2)),
    "log_softmax": _case(_unary(ops.log_softmax, -2, 2)),
    "reshape": _case(_unary(lambda x: ops.reshape(x, (4, 3)))),
    "concat": _case(_concat),
    "take_rows": _case(_take_rows),
    "sum": _case(_unary(ops.tensor_sum)),
    "mean": _case(_unary(ops.mean)),
    "matmul": _case(_matmul),
    "linear": _case(_linear),
    "conv1d_k1": _case(_conv1d),
    "conv2d_stride1": _case(_conv2d(1)),
    "conv2d_stride2": _case(_conv2d(2)),
    "avg_pool_length": _case(_avg_pool),
    "channel_scale": _case(_channel_scale),
    "row_scale": _case(_row_scale),
    "row_norm": _case(_unary(ops.row_norm)),
    "normalize_columns": _case(_unary(ops.normalize_columns)),
    "margin_psi": _case(_margin_psi),
    "sphere_loss": _case(_sphere),
    "bce_loss": _case(_bce),
    "cross_entropy": _case(_cross_entropy),
}


def tiny_model_case(seed: int, config: Optional[TrainConfig] = None, batch: int = 7):
    """The full tiny pixel model and its multi-task loss on a random mixed-class batch."""
    rng = np.random.default_rng(derive_seed(seed, "gradcheck-model"))
    cfg = replace(config or TrainConfig(), seed=seed).resolved()
    model = KinshipModel(cfg, "pixels", 0, 3)
    size = cfg.input_size if cfg.backbone == "tiny" else 108
    kins = [TRAINED_CLASSES[i % len(TRAINED_CLASSES)] for i in range(batch)]
    b = Batch(
        [rng.uniform(-1, 1, (size, size, 3)) for _ in range(batch)],
        [rng.uniform(-1, 1, (size, size, 3)) for _ in range(batch)],
        kins, rng.integers(0, 2, batch).astype(float), rng.integers(0, 3, batch), rng.integers(0, 3, batch),
    )
    lam = float(np.exp(rng.uniform(np.log(cfg.lambda_end), np.log(cfg.lambda_start))))
    return (lambda: total_loss(model, b, lam).total), model.named_tensors()


@dataclass
class GradCheckSummary:
    """Worst error per parameter name over many seeds."""

    tol: float
    errors: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    kinks: dict = field(default_factory=dict)
    seeds: int = 0

    def add(self, report: GradCheckReport, prefix: str = "") -> None:
        for name, err in report.errors.items():
            key = prefix + name
            self.errors[key] = max(self.errors.get(key, 0.0), err)
            self.checked[key] = self.checked.get(key, 0) + report.checked[name]
            self.kinks[key] = self.kinks.get(key, 0) + report.kinks[name]

    def as_report(self) -> GradCheckReport:
        return GradCheckReport(self.tol, 0.0, dict(self.errors), dict(self.checked), dict(self.kinks))

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def kink_fraction(self) -> float:
        return sum(self.kinks.values()) / max(sum(self.checked.values()), 1)

    @property
    def passed(self) -> bool:
        """Every error below ``tol``; the kink allowance applies to the pooled probes."""
        return self.max_error < self.tol and self.kink_fraction <= MAX_KINK_FRACTION


def check_layers(seeds, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckSummary:
    out = GradCheckSummary(tol)
    for seed in seeds:
        for name, build in LAYER_CASES.items():
            f, params = build(np.random.default_rng(derive_seed(seed, "layer", name)))
            out.add(grad_check(f, params, eps=eps, tol=tol, seed=seed), prefix=f"{name}/")
        out.seeds += 1
    return out


def check_model(seeds, eps: float = 1e-5, tol: float = 1e-4, tensors_per_seed: int = 24, coords: int = 1,
                config: Optional[TrainConfig] = None) -> GradCheckSummary:
    """End-to-end check; each seed probes a random subset of parameter tensors."""
    out = GradCheckSummary(tol)
    for seed in seeds:
        f, named = tiny_model_case(seed, config)
        names = list(named)
        rng = np.random.default_rng(derive_seed(seed, "probe"))
        if tensors_per_seed and tensors_per_seed < len(names):
            names = [names[i] for i in np.sort(rng.choice(len(names), tensors_per_seed, replace=False))]
        out.add(grad_check(f, {n: named[n] for n in names}, eps=eps, tol=tol, max_coords=coords, seed=seed))
        out.seeds += 1
    return out
