"""Fold runs, pair scoring, the ablation runner and the alpha sweep."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from ..data.dataset import KinshipDataset, balanced_pairs
from ..data.kinship import PairSample
from ..seeding import derive_seed
from ..training.checkpoint import Checkpoint
from ..training.config import ConfigError, TrainConfig
from ..training.model import KinshipModel
from ..training.trainer import TrainResult, model_from_checkpoint, train
from .folds import FoldSplit, make_folds
from .report import EvalReport, mean_report

THREADS_ENV = "KINFORM_THREADS"


@dataclass(frozen=True)
class AblationArm:
    name: str
    delta: tuple = ()  # ((key, value), ...) applied to the base config

    def apply(self, base: TrainConfig) -> TrainConfig:
        return replace(base, **dict(self.delta)).resolved()


ARMS = (
    AblationArm("fusion-by-concat", (("fusion", "concat"),)),
    AblationArm("embedding-only", (("fusion", "embedding"),)),
    AblationArm("uniform-sampling", (("sampler", "uniform"),)),
    AblationArm("single-task", (("multitask", False),)),
    AblationArm("no-normalization", (("weighting", "none"),)),
    AblationArm("symmetric-normalization", (("weighting", "tied"),)),
    AblationArm("full"),
)
ARM_NAMES = tuple(a.name for a in ARMS)


def arm(name: str) -> AblationArm:
    for a in ARMS:
        if a.name == name:
            return a
    raise ConfigError(f"unknown ablation arm {name!r}; choose from {', '.join(ARM_NAMES)}")


def config_diff(a: TrainConfig, b: TrainConfig) -> dict:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def _as_model(model) -> KinshipModel:
    if isinstance(model, TrainResult):
        return model.model
    if isinstance(model, Checkpoint):
        return model_from_checkpoint(model)
    return model


def evaluate(model: Union[KinshipModel, Checkpoint, TrainResult], pairs: Sequence[PairSample], images: dict,
             threshold: float = 0.5, name: str = "Ours", fold: Optional[int] = None) -> EvalReport:
    """Per-class accuracy: a pair is predicted kin iff its score reaches the threshold."""
    model = _as_model(model)
    cfg = model.config
    scores = model.score_pairs(pairs, images)
    cuts = model.decision_thresholds(pairs, threshold)
    labels = np.array([p.label for p in pairs])
    tags = np.array([p.kin.tag for p in pairs])
    acc, counts, skipped = {}, {}, {}
    for tag in dict.fromkeys(tags.tolist()):
        sel = tags == tag
        if np.isnan(scores[sel]).any() or np.isnan(cuts[sel]).any():
            skipped[tag] = int(sel.sum())
            continue
        correct = (scores[sel] >= cuts[sel]) == (labels[sel] == 1)
        acc[tag] = 100.0 * float(correct.mean())
        counts[tag] = int(sel.sum())
    ordered = {t: acc[t] for t in sorted(acc, key=_class_rank)}
    mode = "calibrated-cosine" if cfg.fusion == "embedding" else repr(float(threshold))
    return EvalReport(ordered, {t: counts[t] for t in ordered}, skipped, name, fold, cfg.protocol, cfg.digest(),
                      cfg.seed, mode)


def _class_rank(tag: str) -> int:
    from ..data.kinship import ALL_CLASSES, KinshipClass

    return ALL_CLASSES.index(KinshipClass.parse(tag))


@dataclass
class FoldRun:
    fold: int
    test: EvalReport
    train: EvalReport
    checkpoint: Checkpoint


def run_fold(dataset: KinshipDataset, config: TrainConfig, split: FoldSplit, fold: int, name: str = "Ours") -> FoldRun:
    """Train on all folds but ``fold`` and evaluate on both sides of the split."""
    cfg = config.resolved()
    train_ds, test_ds = split.split(dataset, fold)
    result = train(train_ds, cfg)
    test_pairs = split.test_pairs(dataset, fold, cfg.kin_classes)
    train_pairs = balanced_pairs(train_ds, cfg.kin_classes, derive_seed(split.seed, "train-pairs", fold))
    return FoldRun(
        fold,
        evaluate(result.model, test_pairs, test_ds.images, name=name, fold=fold),
        evaluate(result.model, train_pairs, train_ds.images, name=name, fold=fold),
        result.checkpoint,
    )


def n_workers(jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(cap, jobs))


def _run_job(args) -> FoldRun:
    return run_fold(*args)


def run_jobs(jobs: list) -> list:
    """Run independent fold jobs, in parallel processes when allowed; results keep job order."""
    workers = n_workers(len(jobs))
    if workers == 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


@dataclass
class CrossValidation:
    split: FoldSplit
    runs: list = field(default_factory=list)

    @property
    def test(self) -> EvalReport:
        return mean_report([r.test for r in self.runs])

    @property
    def train(self) -> EvalReport:
        return mean_report([r.train for r in self.runs])


def cross_validate(dataset: KinshipDataset, config: TrainConfig, k: int = 5, folds: Optional[Sequence[int]] = None,
                   split: Optional[FoldSplit] = None, name: str = "Ours") -> CrossValidation:
    split = split or make_folds(dataset, k, config.seed)
    folds = range(split.k) if folds is None else folds
    runs = run_jobs([(dataset, config, split, f, name) for f in folds])
    return CrossValidation(split, runs)


@dataclass
class AblationResult:
    split_digest: str
    rows: list  # [(arm name, test EvalReport, train EvalReport)]
    configs: dict  # arm name -> TrainConfig

    def test_reports(self) -> list:
        return [t for _, t, _ in self.rows]

    def report(self, name: str) -> EvalReport:
        for n, t, _ in self.rows:
            if n == name:
                return t
        raise KeyError(name)

    def gap(self, name: str) -> float:
        """Train minus test average accuracy (percentage points)."""
        for n, t, tr in self.rows:
            if n == name:
                return tr.average - t.average
        raise KeyError(name)


def run_ablation(dataset: KinshipDataset, base: TrainConfig, arms: Optional[Sequence] = None, seed: Optional[int] = None,
                 k: int = 5, folds: Optional[Sequence[int]] = None) -> AblationResult:
    """Train every arm on identical folds and seeds; each differs from the base by one key."""
    base = base if seed is None else replace(base, seed=seed)
    base = base.resolved()
    if base.protocol == "restricted":
        raise ConfigError("the ablation arms need the unrestricted protocol")
    chosen = [arm(a) if isinstance(a, str) else a for a in (arms or ARMS)]
    split = make_folds(dataset, k, base.seed)
    configs = {}
    for a in chosen:
        cfg = a.apply(base)
        if len(config_diff(base, cfg)) > 1:
            raise ConfigError(f"arm {a.name} changes more than one component")
        configs[a.name] = cfg
    folds = list(range(split.k) if folds is None else folds)
    jobs = [(dataset, configs[a.name], split, f, a.name) for a in chosen for f in folds]
    runs = run_jobs(jobs)
    rows = []
    for i, a in enumerate(chosen):
        mine = runs[i * len(folds):(i + 1) * len(folds)]
        rows.append((a.name, mean_report([r.test for r in mine], a.name), mean_report([r.train for r in mine], a.name)))
    return AblationResult(split.digest(), rows, configs)


@dataclass
class AlphaSweep:
    split_digest: str
    rows: list  # [(alpha, EvalReport)]

    def spread(self) -> float:
        avgs = [r.average for _, r in self.rows]
        return max(avgs) - min(avgs)

    def render(self) -> str:
        lines = ["alpha  average"]
        lines += [f"{a:<5g}  {r.average:7.2f}" for a, r in self.rows]
        lines.append(f"# spread={self.spread():.2f} folds={self.split_digest[:16]}")
        return "\n".join(lines) + "\n"


def alpha_sweep(dataset: KinshipDataset, values: Sequence[float], base: TrainConfig, seed: Optional[int] = None,
                k: int = 5, folds: Optional[Sequence[int]] = None) -> AlphaSweep:
    base = base if seed is None else replace(base, seed=seed)
    base = base.resolved()
    if base.protocol != "unrestricted":
        raise ConfigError("the alpha sweep runs under the unrestricted protocol")
    split = make_folds(dataset, k, base.seed)
    folds = list(range(split.k) if folds is None else folds)
    jobs = [(dataset, replace(base, alpha=float(v)), split, f, f"alpha={v:g}") for v in values for f in folds]
    runs = run_jobs(jobs)
    rows = []
    for i, v in enumerate(values):
        mine = runs[i * len(folds):(i + 1) * len(folds)]
        rows.append((float(v), mean_report([r.test for r in mine])))
    return AlphaSweep(split.digest(), rows)

