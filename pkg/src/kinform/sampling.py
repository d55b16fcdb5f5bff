"""Adaptive sampling of imbalanced family datasets.

Per kinship class, the number of positive pairs drawn from a family is capped
at the (lower) median of the per-family pair counts. Parent-child classes pick
images from per-member cyclic buffers so a member's images rotate before any
repeats; sibling classes draw a shuffled subset of the family's pairs.
"""

from __future__ import annotations

import hashlib
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data.dataset import KinshipDataset, enumerate_positive_pairs, family_member_pairs, family_pair_count
from .data.kinship import KinshipClass, PairSample
from .seeding import derive_seed

CYCLIC_CLASSES = frozenset({KinshipClass.FD, KinshipClass.FS, KinshipClass.MD, KinshipClass.MS})


class SamplingError(ValueError):
    pass


class CyclicBuffer:
    """Rotating cursor over a member's images.

    Without an rng the images come back in their stored order; with one, each
    pass through the list uses a fresh permutation.
    """

    def __init__(self, items: Sequence, rng: Optional[np.random.Generator] = None):
        if not items:
            raise SamplingError("cyclic buffer needs at least one item")
        self.items = list(items)
        self.rng = rng
        self.cursor = 0
        self._order = self._new_order()

    def _new_order(self) -> list:
        if self.rng is None:
            return list(range(len(self.items)))
        return [int(i) for i in self.rng.permutation(len(self.items))]

    def draw(self):
        item = self.items[self._order[self.cursor]]
        self.cursor += 1
        if self.cursor == len(self.items):
            self.cursor = 0
            self._order = self._new_order()
        return item

    def __len__(self) -> int:
        return len(self.items)


def family_cap(dataset: KinshipDataset, kin: KinshipClass) -> int:
    """Lower median of |f_k| over the families that have at least one pair."""
    counts = [c for c in dataset.pair_counts(kin).values() if c > 0]
    if not counts:
        raise SamplingError(f"class {kin.tag} has no positive pairs")
    return statistics.median_low(counts)


@dataclass
class EpochPlan:
    seed: int
    pairs: dict = field(default_factory=dict)  # KinshipClass -> list[PairSample]
    drawn: dict = field(default_factory=dict)  # KinshipClass -> {family_id: count}
    caps: dict = field(default_factory=dict)  # KinshipClass -> cap

    def merge(self, other: "EpochPlan") -> "EpochPlan":
        self.pairs.update(other.pairs)
        self.drawn.update(other.drawn)
        self.caps.update(other.caps)
        return self

    def all_pairs(self) -> list:
        return [p for kin in self.pairs for p in self.pairs[kin]]

    def family_totals(self) -> dict:
        tot = Counter()
        for per in self.drawn.values():
            tot.update(per)
        return dict(tot)

    def digest(self) -> str:
        h = hashlib.sha256()
        for kin, pairs in self.pairs.items():
            h.update(kin.tag.encode())
            for p in pairs:
                h.update(f"{p.image_a}|{p.image_b}|{p.label}\n".encode())
        return h.hexdigest()


def _draw_cyclic(fam, kin, n, rng) -> list:
    member_pairs = family_member_pairs(fam, kin)
    buffers = {}
    for a, b in member_pairs:
        for m in (a, b):
            if m.member_id not in buffers:
                buffers[m.member_id] = CyclicBuffer(m.image_refs, rng)
    budget = {(a.member_id, b.member_id): len(a.image_refs) * len(b.image_refs) for a, b in member_pairs}
    order = [member_pairs[i] for i in rng.permutation(len(member_pairs))]
    used, out, i = set(), [], 0
    while len(out) < n:
        a, b = order[i % len(order)]
        i += 1
        key = (a.member_id, b.member_id)
        if budget[key] == 0:
            continue
        ia = buffers[a.member_id].draw()
        ib = buffers[b.member_id].draw()
        # an exhausted rotation can revisit a combination; step b forward instead
        for _ in range(len(b.image_refs) - 1):
            if (ia, ib) not in used:
                break
            ib = buffers[b.member_id].draw()
        if (ia, ib) in used:
            # a reshuffle at a wrap boundary can still collide; take any unused combination
            free = [(x, y) for x in a.image_refs for y in b.image_refs if (x, y) not in used]
            ia, ib = free[int(rng.integers(len(free)))]
        used.add((ia, ib))
        budget[key] -= 1
        out.append(PairSample(ia, ib, kin, 1, fam.family_id, fam.family_id, a.member_id, b.member_id))
    return out


def build_epoch_plan(dataset: KinshipDataset, kin: KinshipClass, cap: Optional[int] = None, seed: int = 0) -> EpochPlan:
    """Draw min(|f_k|, cap) positive pairs from every family for one class."""
    if cap is None:
        cap = family_cap(dataset, kin)
    rng = np.random.default_rng(derive_seed(seed, "plan", kin.tag))
    plan = EpochPlan(seed=seed, caps={kin: cap})
    pairs, drawn = [], {}
    for fam in dataset.families:
        total = family_pair_count(fam, kin)
        n = min(total, cap)
        if n == 0:
            continue
        if kin in CYCLIC_CLASSES:
            got = _draw_cyclic(fam, kin, n, rng)
        else:
            fam_pairs = enumerate_positive_pairs(_single(dataset, fam), kin)
            got = [fam_pairs[i] for i in rng.permutation(len(fam_pairs))[:n]]
        pairs.extend(got)
        drawn[fam.family_id] = len(got)
    plan.pairs[kin] = pairs
    plan.drawn[kin] = drawn
    return plan


def build_uniform_plan(dataset: KinshipDataset, kin: KinshipClass, n_pairs: Optional[int] = None, seed: int = 0) -> EpochPlan:
    """Uniform random sampling over all positive pairs (no family balancing)."""
    pos = enumerate_positive_pairs(dataset, kin)
    rng = np.random.default_rng(derive_seed(seed, "uniform", kin.tag))
    n = len(pos) if n_pairs is None else min(n_pairs, len(pos))
    got = [pos[i] for i in np.sort(rng.choice(len(pos), size=n, replace=False))] if pos else []
    got = [got[i] for i in rng.permutation(len(got))]
    plan = EpochPlan(seed=seed)
    plan.pairs[kin] = got
    plan.drawn[kin] = dict(Counter(p.family_a for p in got))
    return plan


class _single:
    """Dataset view restricted to one family (enumeration only needs ``families``)."""

    def __init__(self, dataset, fam):
        self.families = (fam,)


# -- statistics -------------------------------------------------------------

@dataclass(frozen=True)
class BalanceStats:
    """Max/mean/std of per-family and per-member counts (population std)."""

    family_max: float
    family_mean: float
    family_std: float
    member_max: float
    member_mean: float
    member_std: float
    label: str = ""

    @classmethod
    def from_counts(cls, family_counts: Sequence[float], member_counts: Sequence[float], label: str = "") -> "BalanceStats":
        f = np.asarray(family_counts, dtype=float)
        m = np.asarray(member_counts, dtype=float)
        return cls(
            float(f.max()), float(f.mean()), float(f.std()),
            float(m.max()) if m.size else 0.0, float(m.mean()) if m.size else 0.0, float(m.std()) if m.size else 0.0,
            label,
        )


def balance_stats(source: Union[KinshipDataset, EpochPlan], unit: str = "pairs", classes: Sequence[KinshipClass] = (), label: str = "") -> BalanceStats:
    """Per-family and per-member counts of a raw dataset or of a drawn plan.

    ``unit="pairs"`` counts positive pairs a family (member) takes part in,
    summed over ``classes``; ``unit="images"`` counts stored images and only
    applies to a raw dataset.
    """
    if isinstance(source, EpochPlan):
        if unit != "pairs":
            raise ValueError("plans can only be measured in pairs")
        fam = Counter()
        mem = Counter()
        for kin, pairs in source.pairs.items():
            for p in pairs:
                fam[p.family_a] += 1
                mem[p.member_a] += 1
                mem[p.member_b] += 1
        return BalanceStats.from_counts(list(fam.values()) or [0], list(mem.values()), label)
    ds = source
    if unit == "images":
        fams = [sum(len(m.image_refs) for m in f.members) for f in ds.families]
        mems = [len(m.image_refs) for m in ds.members]
        return BalanceStats.from_counts(fams, mems, label)
    if unit != "pairs":
        raise ValueError(f"unknown unit {unit!r}")
    fam = Counter({fid: 0 for fid in ds.family_ids})
    mem = Counter()
    for kin in classes:
        for f in ds.families:
            for a, b in family_member_pairs(f, kin):
                n = len(a.image_refs) * len(b.image_refs)
                fam[f.family_id] += n
                mem[a.member_id] += n
                mem[b.member_id] += n
    return BalanceStats.from_counts(list(fam.values()), list(mem.values()), label)


def _fmt(x: float) -> str:
    return f"{round(x):,}"


STATS_HEADER = ("Fold#", "Maximum", "Mean", "Std", "Maximum", "Mean", "Std")


def format_stats_table(sections: dict) -> str:
    """Render ``{section title: [BalanceStats, ...]}`` as aligned text.

    Each row is one fold (``BalanceStats.label``): family max/mean/std, then
    member max/mean/std.
    """
    rows = [STATS_HEADER]
    marks = []
    for title, stats in sections.items():
        marks.append((len(rows), title))
        for s in stats:
            rows.append((s.label, _fmt(s.family_max), _fmt(s.family_mean), _fmt(s.family_std),
                         _fmt(s.member_max), _fmt(s.member_mean), _fmt(s.member_std)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(STATS_HEADER))]
    total = sum(widths) + 2 * (len(widths) - 1) + 2

    def line(r):
        left = "  ".join(r[i].rjust(widths[i]) for i in range(4))
        right = "  ".join(r[i].rjust(widths[i]) for i in range(4, 7))
        return f"{left} | {right}"

    out = [" " * (widths[0] + 2) + "#Images per family".center(sum(widths[1:4]) + 4) + " | " + "#Images per family member",
           line(rows[0]), "-" * total]
    mark = dict(marks)
    for i, r in enumerate(rows[1:], 1):
        if i in mark:
            out.append(f"[{mark[i]}]")
        out.append(line(r))
    return "\n".join(out)


def stats_csv_rows(sections: dict) -> list:
    rows = [["section", "fold", "family_max", "family_mean", "family_std", "member_max", "member_mean", "member_std"]]
    for title, stats in sections.items():
        for s in stats:
            rows.append([title, s.label, f"{s.family_max:g}", f"{s.family_mean:.4f}", f"{s.family_std:.4f}",
                         f"{s.member_max:g}", f"{s.member_mean:.4f}", f"{s.member_std:.4f}"])
    return rows
