"""Family-disjoint k-fold splits."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..data.dataset import DatasetError, KinshipDataset, balanced_pairs
from ..seeding import derive_seed


@dataclass(frozen=True)
class FoldSplit:
    k: int
    seed: int
    folds: tuple  # tuple of tuples of family ids

    def fold_of(self, family_id: str) -> int:
        for i, fams in enumerate(self.folds):
            if family_id in fams:
                return i
        raise KeyError(family_id)

    def train_families(self, fold: int) -> list:
        return [f for i, fams in enumerate(self.folds) if i != fold for f in fams]

    def split(self, dataset: KinshipDataset, fold: int) -> tuple:
        """(train, test) datasets for ``fold``."""
        if not 0 <= fold < self.k:
            raise IndexError(f"fold {fold} out of range for k={self.k}")
        return dataset.subset(self.train_families(fold)), dataset.subset(self.folds[fold])

    def test_pairs(self, dataset: KinshipDataset, fold: int, classes) -> list:
        test = dataset.subset(self.folds[fold])
        return balanced_pairs(test, classes, derive_seed(self.seed, "test-pairs", fold))

    def to_bytes(self) -> bytes:
        lines = [f"k={self.k} seed={self.seed}"]
        lines += [f"{i}\t" + ",".join(fams) for i, fams in enumerate(self.folds)]
        return ("\n".join(lines) + "\n").encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def make_folds(dataset: KinshipDataset, k: int = 5, seed: int = 0) -> FoldSplit:
    """Partition families into ``k`` groups whose sizes differ by at most one."""
    fams = list(dataset.family_ids)
    if k < 2:
        raise ValueError("need at least two folds")
    if len(fams) < k:
        raise DatasetError(f"{len(fams)} families cannot fill {k} folds")
    order = np.random.default_rng(derive_seed(seed, "folds")).permutation(len(fams))
    groups = [[] for _ in range(k)]
    for rank, i in enumerate(order):
        groups[rank % k].append(fams[i])
    return FoldSplit(k, seed, tuple(tuple(sorted(g)) for g in groups))
