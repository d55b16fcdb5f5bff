"""Joint training of the backbone and all kinship heads under the masked multi-task loss.

Per batch the objective is

    total = L_sphere(phi) + L_sphere(psi) + alpha^2 * sum_k mask_k * BCE_k

where ``mask`` is the one-hot route of each sample's class, so a sample only
trains the head of its own class while every sample refines the shared
backbone through both angular-margin identity losses. Per-sample terms are
summed and divided by the full batch size, which keeps gradients additive
over class sub-batches.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..autograd import Tape, Tensor, ops
from ..autograd.tensor import NumericError, get_default_dtype, set_default_dtype
from ..backbone import lambda_schedule
from ..data.dataset import DatasetError, KinshipDataset, balanced_pairs, sample_negatives
from ..data.io import PairList
from ..data.kinship import GRANDPARENT_CLASSES, TRAINED_CLASSES, KinshipClass, PairSample
from ..sampling import build_epoch_plan, build_uniform_plan, family_cap
from ..seeding import derive_seed
from .augment import augment
from .checkpoint import Checkpoint
from .config import ConfigError, TrainConfig
from .model import KinshipModel

log = logging.getLogger(__name__)

HEAD_ORDER = TRAINED_CLASSES
METRIC_FIELDS = ["epoch", "lr", "total", "sphere_phi", "sphere_psi"] + [f"bce_{k.tag}" for k in HEAD_ORDER]


class TrainingDiverged(RuntimeError):
    """A non-finite loss appeared; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Optional[Checkpoint]):
        super().__init__(message)
        self.checkpoint = checkpoint


def route_mask(kin: KinshipClass, grandparents: bool = False) -> np.ndarray:
    """Per-head multipliers: 1 for the sample's own head, 0 elsewhere."""
    kin = KinshipClass.parse(kin) if isinstance(kin, str) else kin
    order = HEAD_ORDER + (GRANDPARENT_CLASSES if grandparents else ())
    if kin in GRANDPARENT_CLASSES and not grandparents:
        raise ConfigError(f"class {kin.tag} is a grandparent class and those heads are disabled")
    mask = np.zeros(len(order))
    mask[order.index(kin)] = 1.0
    return mask


@dataclass
class Batch:
    """Model-ready samples: inputs already side-assigned and augmented."""

    xa: list
    xb: list
    kins: list
    labels: np.ndarray
    ids_a: Optional[np.ndarray] = None
    ids_b: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.kins)


@dataclass
class LossBreakdown:
    sphere_phi: Tensor
    sphere_psi: Tensor
    bce: dict  # KinshipClass -> Tensor (unweighted, already masked)
    total: Tensor
    alpha: float = 1.0

    def values(self) -> dict:
        out = {"total": self.total.item(), "sphere_phi": self.sphere_phi.item(), "sphere_psi": self.sphere_psi.item()}
        for kin in HEAD_ORDER:
            out[f"bce_{kin.tag}"] = self.bce[kin].item() if kin in self.bce else 0.0
        return out

    def recomposed(self) -> float:
        """Sum of the parts, to check additivity against ``total``."""
        return self.sphere_phi.item() + self.sphere_psi.item() + self.alpha ** 2 * sum(t.item() for t in self.bce.values())


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def total_loss(model: KinshipModel, batch: Batch, lam: float, alpha: Optional[float] = None,
               restricted: Optional[bool] = None, denom: Optional[int] = None) -> LossBreakdown:
    """Masked multi-task loss of one batch; call inside an active ``Tape``."""
    cfg = model.config
    alpha = cfg.alpha if alpha is None else alpha
    restricted = (cfg.protocol == "restricted") if restricted is None else restricted
    n = len(batch)
    denom = n if denom is None else denom
    if not restricted and (batch.ids_a is None or batch.ids_b is None):
        raise DatasetError("identity labels are required for the sphere losses in the unrestricted protocol")
    routes = np.stack([route_mask(k, cfg.include_grandparents) for k in batch.kins]) if n else np.zeros((0, 7))
    order = HEAD_ORDER + (GRANDPARENT_CLASSES if cfg.include_grandparents else ())

    sphere = [_zero(), _zero()]
    bce: dict = {}
    groups: dict = {}
    for i, kin in enumerate(batch.kins):
        groups.setdefault(model.group_of(kin), []).append(i)
    for g, idx in groups.items():
        bb = model.backbones[g]
        x = bb.prepare([batch.xa[i] for i in idx] + [batch.xb[i] for i in idx])
        if restricted:
            # frozen backbone: embeddings are constants for this step
            with Tape():
                emb = Tensor(bb.forward(x).data)
        else:
            emb = bb.forward(x)
        m = len(idx)
        phi = ops.take_rows(emb, np.arange(m))
        psi = ops.take_rows(emb, np.arange(m, 2 * m))
        if not restricted:
            for side, (e, ids) in enumerate(((phi, batch.ids_a), (psi, batch.ids_b))):
                term = ops.scale(bb.sphere_loss(e, ids[idx], lam, reduction="sum"), 1.0 / denom)
                sphere[side] = ops.add(sphere[side], term)
        if cfg.fusion == "embedding":
            continue
        local = np.array(idx)
        for h, kin in enumerate(order):
            rows = np.flatnonzero(routes[local, h])
            if rows.size == 0:
                continue
            head = model.heads[kin]
            score = head.score(ops.take_rows(phi, rows), ops.take_rows(psi, rows))
            weight = routes[local[rows], h]
            per = ops.binary_cross_entropy(score, batch.labels[local[rows]], reduction="none")
            term = ops.scale(ops.weighted_sum(per, weight), 1.0 / denom)
            bce[kin] = ops.add(bce[kin], term) if kin in bce else term
    total = ops.add(sphere[0], sphere[1])
    if bce:
        mt = None
        for kin in order:
            if kin in bce:
                mt = bce[kin] if mt is None else ops.add(mt, bce[kin])
        total = ops.add(total, ops.scale(mt, alpha ** 2))
    return LossBreakdown(sphere[0], sphere[1], bce, total, alpha)


# -- epoch construction ------------------------------------------------------------


def _class_samples(source, cfg: TrainConfig, kin: KinshipClass, epoch: int) -> list:
    seed = derive_seed(cfg.seed, "epoch", epoch)
    if isinstance(source, PairList):
        pool = [p for p in source if p.kin == kin]
        rng = np.random.default_rng(derive_seed(seed, "pairs", kin.tag))
        return [pool[i] for i in rng.permutation(len(pool))]
    if cfg.sampler == "adaptive":
        plan = build_epoch_plan(source, kin, seed=seed)
    else:
        n = sum(min(c, family_cap(source, kin)) for c in source.pair_counts(kin).values())
        plan = build_uniform_plan(source, kin, n_pairs=n, seed=seed)
    pos = plan.pairs[kin]
    if not pos:
        return []
    neg = sample_negatives(pos, source, derive_seed(seed, "negatives", kin.tag))
    both = pos + neg
    rng = np.random.default_rng(derive_seed(seed, "shuffle", kin.tag))
    return [both[i] for i in rng.permutation(len(both))]


def epoch_samples(source, cfg: TrainConfig, epoch: int) -> list:
    """All samples of one epoch, classes interleaved round-robin."""
    per_class = [_class_samples(source, cfg, kin, epoch) for kin in cfg.kin_classes]
    out, pos = [], [0] * len(per_class)
    while True:
        moved = False
        for c, items in enumerate(per_class):
            if pos[c] < len(items):
                out.append(items[pos[c]])
                pos[c] += 1
                moved = True
        if not moved:
            return out


def make_batch(samples: Sequence[PairSample], images: dict, cfg: TrainConfig, id_index: Optional[dict],
               rng: np.random.Generator, pixels: bool) -> Batch:
    xa, xb, ia, ib = [], [], [], []
    for p in samples:
        a, b, ma, mb = p.image_a, p.image_b, p.member_a, p.member_b
        # symmetric classes have no natural side
        if p.kin.symmetric and rng.random() < 0.5:
            a, b, ma, mb = b, a, mb, ma
        ra, rb = images[a], images[b]
        if pixels:
            ra, rb = ra.pixels, rb.pixels
            if cfg.augment:
                toggles = dict(gamma=cfg.aug_gamma, scale=cfg.aug_scale, flip=cfg.aug_flip, jitter=cfg.aug_jitter)
                ra, rb = augment(ra, rng, **toggles), augment(rb, rng, **toggles)
        else:
            ra, rb = ra.embedding, rb.embedding
        xa.append(ra)
        xb.append(rb)
        if id_index is not None:
            ia.append(id_index[ma])
            ib.append(id_index[mb])
    ids = (np.array(ia, dtype=np.intp), np.array(ib, dtype=np.intp)) if id_index is not None else (None, None)
    return Batch(xa, xb, [p.kin for p in samples], np.array([p.label for p in samples], dtype=float), *ids)


# -- optimizer and state -----------------------------------------------------------


class MomentumSGD:
    def __init__(self, named: dict, lr: float, momentum: float):
        self.named = named
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in named.items()}

    def step(self) -> None:
        for k, t in self.named.items():
            if t.grad is None:
                continue
            v = self.momentum * self.velocity[k] + t.grad
            self.velocity[k] = v
            t.data = t.data - self.lr * v
            t.grad = None


@dataclass
class TrainResult:
    model: KinshipModel
    checkpoint: Checkpoint
    metrics: list = field(default_factory=list)

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def build_model(source, cfg: TrainConfig) -> KinshipModel:
    images = source.images
    first = next(iter(images.values()))
    mode = "embedding" if first.is_embedding else "pixels"
    dim = len(first.embedding) if first.is_embedding else 0
    n_ids = source.n_identities if isinstance(source, KinshipDataset) else 1
    if mode == "pixels" and cfg.backbone == "tiny" and first.pixels.shape[0] != cfg.input_size:
        raise ConfigError(f"images are {first.pixels.shape[0]}px but input_size is {cfg.input_size}")
    return KinshipModel(cfg, mode, dim, n_ids)


def model_from_checkpoint(ck: Checkpoint) -> KinshipModel:
    cfg = TrainConfig.from_dict(ck.config).resolved()
    model = KinshipModel(cfg, ck.meta["input_mode"], ck.meta["input_dim"], ck.meta["n_identities"])
    named = model.named_tensors()
    params = ck.params()
    if set(params) != set(named):
        raise ValueError("checkpoint tensors do not match the model layout")
    for k, t in named.items():
        if params[k].shape != t.shape:
            raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {t.shape}")
        t.data = params[k].copy()
    model.thresholds = {KinshipClass.parse(k): v for k, v in ck.thresholds.items()}
    return model


def _snapshot(model, opt, cfg, epoch, global_step, history, last_drop) -> Checkpoint:
    tensors = {k: t.data.copy() for k, t in model.named_tensors().items()}
    tensors.update({f"opt/{k}": v.copy() for k, v in opt.velocity.items()})
    return Checkpoint(
        config=cfg.to_dict(), epoch=epoch, lr=opt.lr, global_step=global_step, tensors=tensors,
        loss_history=list(history), last_drop=last_drop,
        thresholds={k.tag: v for k, v in model.thresholds.items()},
        meta={"input_mode": model.input_mode, "input_dim": model.input_dim, "n_identities": model.n_identities},
        rng_state={"scheme": "derived-sha256", "seed": cfg.seed, "next_epoch": epoch},
    )


def _trainable(model: KinshipModel, restricted: bool) -> dict:
    named = model.named_tensors()
    if restricted:
        return {k: t for k, t in named.items() if not k.startswith("backbone/")}
    return named


def plateaued(history: Sequence[float], last_drop: int, window: int, tol: float) -> bool:
    """Relative improvement over the last ``window`` epochs below ``tol`` (since the last drop)."""
    if len(history) - last_drop <= window:
        return False
    old, new = history[-1 - window], history[-1]
    return (old - new) / max(abs(old), 1e-300) < tol


def train(source: Union[KinshipDataset, PairList], config: TrainConfig, resume: Optional[Checkpoint] = None,
          stop_after_epoch: Optional[int] = None, metrics_path=None, checkpoint_path=None) -> TrainResult:
    """Train a model on ``source`` (a family-tree dataset or a given pair list)."""
    cfg = config.resolved()
    restricted = cfg.protocol == "restricted"
    if isinstance(source, PairList):
        if not restricted:
            raise ConfigError("a bare pair list carries no identities; use the restricted protocol")
        if not source.images:
            raise DatasetError("pair list has no images loaded")
    elif restricted:
        source = PairList(balanced_pairs(source, cfg.kin_classes, derive_seed(cfg.seed, "restricted")), source.images)
    prev_dtype = get_default_dtype()
    set_default_dtype(np.dtype(cfg.dtype))
    try:
        return _train(source, cfg, restricted, resume, stop_after_epoch, metrics_path, checkpoint_path)
    finally:
        set_default_dtype(prev_dtype)


def _train(source, cfg, restricted, resume, stop_after_epoch, metrics_path, checkpoint_path) -> TrainResult:
    if resume is not None:
        if TrainConfig.from_dict(resume.config).resolved() != cfg:
            raise ConfigError("checkpoint was written with a different config")
        model = model_from_checkpoint(resume)
    else:
        model = build_model(source, cfg)
    pixels = model.input_mode == "pixels"
    id_index = None if restricted else source.identity_index()
    opt = MomentumSGD(_trainable(model, restricted), cfg.lr, cfg.momentum)
    start, global_step, history, last_drop = 0, 0, [], 0
    if resume is not None:
        opt.lr = resume.lr
        for k, v in resume.velocities().items():
            opt.velocity[k] = v.copy()
        start, global_step = resume.epoch, resume.global_step
        history, last_drop = list(resume.loss_history), resume.last_drop
    steps_per_epoch = -(-len(epoch_samples(source, cfg, 0)) // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    metrics: list = []
    last_good = _snapshot(model, opt, cfg, start, global_step, history, last_drop)
    end = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    for epoch in range(start, end):
        samples = epoch_samples(source, cfg, epoch)
        rng = np.random.default_rng(derive_seed(cfg.seed, "batches", epoch))
        sums = dict.fromkeys(METRIC_FIELDS[2:], 0.0)
        for s in range(0, len(samples), cfg.batch_size):
            chunk = samples[s:s + cfg.batch_size]
            batch = make_batch(chunk, source.images, cfg, id_index, rng, pixels)
            lam = lambda_schedule(global_step, total_steps, cfg.lambda_start, cfg.lambda_end)
            try:
                with Tape() as tape:
                    parts = total_loss(model, batch, lam, restricted=restricted)
                if not np.isfinite(parts.total.item()):
                    raise NumericError("non-finite loss")
                tape.backward(parts.total, leaves=list(opt.named.values()))
                for t in opt.named.values():
                    if not np.all(np.isfinite(t.grad)):
                        raise NumericError("non-finite gradient")
            except (NumericError, FloatingPointError) as err:
                raise TrainingDiverged(f"training diverged at epoch {epoch + 1}, step {global_step}: {err}",
                                       last_good) from err
            opt.step()
            global_step += 1
            for k, v in parts.values().items():
                sums[k] += v * len(batch)
        row = {"epoch": epoch + 1, "lr": opt.lr}
        row.update({k: v / max(len(samples), 1) for k, v in sums.items()})
        metrics.append(row)
        history.append(row["total"])
        log.info("epoch %d lr %.2e loss %.6f", epoch + 1, opt.lr, row["total"])
        if plateaued(history, last_drop, cfg.plateau_window, cfg.plateau_tol) and opt.lr > cfg.lr_min:
            opt.lr = max(opt.lr / 10.0, cfg.lr_min)
            last_drop = len(history)
        if cfg.fusion == "embedding":
            model.calibrate_thresholds(_calibration_pairs(source, cfg), source.images)
        last_good = _snapshot(model, opt, cfg, epoch + 1, global_step, history, last_drop)

    if metrics_path is not None:
        text = metrics_to_csv(metrics)
        p = Path(metrics_path)
        if resume is not None and p.exists():
            text = text.split("\n", 1)[1]
            with open(p, "a", encoding="utf-8") as fh:
                fh.write(text)
        else:
            p.write_text(text, encoding="utf-8")
    if checkpoint_path is not None:
        last_good.save(checkpoint_path)
    return TrainResult(model, last_good, metrics)


def _calibration_pairs(source, cfg: TrainConfig) -> list:
    if isinstance(source, PairList):
        return list(source)
    return balanced_pairs(source, cfg.kin_classes, derive_seed(cfg.seed, "calibration"))


def resume_training(source, checkpoint: Checkpoint, **kw) -> TrainResult:
    cfg = TrainConfig.from_dict(checkpoint.config)
    return train(source, cfg, resume=checkpoint, **kw)


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes).resolved()
