"""Family-structured datasets, positive-pair enumeration and negative sampling."""

from __future__ import annotations

from collections import Counter, OrderedDict
from itertools import combinations
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ..seeding import derive_seed
from .kinship import ALL_CLASSES, Family, ImageRecord, KinshipClass, Member, PairSample


class DatasetError(ValueError):
    """The dataset or an input file violates the data model."""


class MissingImagesError(DatasetError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:10]) + (" ..." if len(self.missing) > 10 else "")
        super().__init__(f"{len(self.missing)} image reference(s) do not resolve: {shown}")


class KinshipDataset:
    """Immutable collection of families and the images their members refer to."""

    def __init__(self, families: Iterable[Family], images: Mapping[str, ImageRecord]):
        self.families = tuple(families)
        self.images = dict(images)
        self._members: "OrderedDict[str, Member]" = OrderedDict()
        self._by_family = {}
        self.validate()

    def validate(self) -> None:
        missing = []
        for fam in self.families:
            if fam.family_id in self._by_family:
                raise DatasetError(f"duplicate family_id {fam.family_id!r}")
            self._by_family[fam.family_id] = fam
            for m in fam.members:
                if m.member_id in self._members:
                    raise DatasetError(f"duplicate member_id {m.member_id!r}")
                if m.family_id != fam.family_id:
                    raise DatasetError(f"member {m.member_id!r} lists family {m.family_id!r}, filed under {fam.family_id!r}")
                self._members[m.member_id] = m
                missing.extend(r for r in m.image_refs if r not in self.images)
        if missing:
            raise MissingImagesError(missing)

    # -- lookup -------------------------------------------------------------

    def family(self, family_id: str) -> Family:
        return self._by_family[family_id]

    def member(self, member_id: str) -> Member:
        return self._members[member_id]

    @property
    def members(self) -> list:
        return list(self._members.values())

    @property
    def family_ids(self) -> list:
        return [f.family_id for f in self.families]

    def identity_index(self) -> dict:
        """Map every member_id to a dense identity label (order of appearance)."""
        return {mid: i for i, mid in enumerate(self._members)}

    @property
    def n_identities(self) -> int:
        return len(self._members)

    @property
    def n_images(self) -> int:
        return sum(len(m.image_refs) for m in self._members.values())

    @property
    def input_mode(self) -> str:
        for rec in self.images.values():
            return "embedding" if rec.is_embedding else "pixels"
        return "embedding"

    @property
    def embedding_dim(self) -> Optional[int]:
        for rec in self.images.values():
            return rec.embedding.shape[0] if rec.is_embedding else None
        return None

    def subset(self, family_ids: Iterable[str]) -> "KinshipDataset":
        keep = set(family_ids)
        fams = [f for f in self.families if f.family_id in keep]
        refs = {r for f in fams for m in f.members for r in m.image_refs}
        return KinshipDataset(fams, {r: self.images[r] for r in self.images if r in refs})

    def pair_counts(self, kin: KinshipClass) -> dict:
        """|f_k| per family: the number of positive image pairs of class ``kin``."""
        return {f.family_id: family_pair_count(f, kin) for f in self.families}

    def __eq__(self, other) -> bool:
        if not isinstance(other, KinshipDataset):
            return NotImplemented
        return self.families == other.families and self.images.keys() == other.images.keys() and all(
            self.images[k] == other.images[k] for k in self.images
        )

    def __repr__(self) -> str:
        return f"KinshipDataset({len(self.families)} families, {len(self._members)} members, {len(self.images)} images)"


def _member_pairs(family: Family, kin: KinshipClass) -> list:
    ra, rb = kin.roles
    if kin.same_role:
        return list(combinations(family.with_role(ra), 2))
    return [(a, b) for a in family.with_role(ra) for b in family.with_role(rb)]


def family_pair_count(family: Family, kin: KinshipClass) -> int:
    return sum(len(a.image_refs) * len(b.image_refs) for a, b in _member_pairs(family, kin))


def family_member_pairs(family: Family, kin: KinshipClass) -> list:
    """Member pairs of ``family`` matching the role pattern of ``kin``."""
    return _member_pairs(family, kin)


def _check_class(kin) -> KinshipClass:
    if isinstance(kin, str):
        return KinshipClass.parse(kin)
    if kin not in ALL_CLASSES:
        raise ValueError(f"unknown kinship class {kin!r}")
    return kin


def enumerate_positive_pairs(dataset: KinshipDataset, kin) -> list:
    """Every within-family image pair matching the class's role pattern.

    Same-role classes (BB, SS) emit each unordered pair of distinct members once.
    """
    kin = _check_class(kin)
    out = []
    for fam in dataset.families:
        for a, b in _member_pairs(fam, kin):
            for ia in a.image_refs:
                for ib in b.image_refs:
                    out.append(PairSample(ia, ib, kin, 1, fam.family_id, fam.family_id, a.member_id, b.member_id))
    return out


def _role_pool(dataset: KinshipDataset, role: str) -> list:
    return [(ref, m.family_id, m.member_id) for m in dataset.members if m.role == role for ref in m.image_refs]


def _valid_negative_count(pool_a, pool_b, same_role: bool) -> int:
    fa = Counter(f for _, f, _ in pool_a)
    if same_role:
        return (len(pool_a) ** 2 - sum(c * c for c in fa.values())) // 2
    fb = Counter(f for _, f, _ in pool_b)
    return len(pool_a) * len(pool_b) - sum(c * fb.get(f, 0) for f, c in fa.items())


def _all_negatives(pool_a, pool_b, same_role: bool) -> list:
    out = []
    for i, a in enumerate(pool_a):
        cands = pool_a[i + 1:] if same_role else pool_b
        out.extend((a, b) for b in cands if b[1] != a[1])
    return out


def sample_negatives(positives: Sequence[PairSample], dataset: KinshipDataset, seed: int) -> list:
    """Draw one cross-family pair per positive, matching the positive's role pattern.

    Pairs are drawn uniformly over all valid cross-family image pairs, without
    repetition while enough distinct pairs exist.
    """
    rng = np.random.default_rng(seed)
    need = Counter(p.kin for p in positives)
    out = []
    for kin in dict.fromkeys(p.kin for p in positives):
        n = need[kin]
        pool_a = _role_pool(dataset, kin.roles[0])
        pool_b = pool_a if kin.same_role else _role_pool(dataset, kin.roles[1])
        valid = _valid_negative_count(pool_a, pool_b, kin.same_role)
        if valid == 0:
            raise DatasetError(f"no cross-family {kin.tag} pairs exist; need at least two families with roles {kin.roles}")
        if valid <= 4 * n:
            cands = _all_negatives(pool_a, pool_b, kin.same_role)
            picks = rng.choice(len(cands), size=n, replace=n > len(cands))
            chosen = [cands[i] for i in picks]
        else:
            chosen, seen = [], set()
            while len(chosen) < n:
                a = pool_a[rng.integers(len(pool_a))]
                b = pool_b[rng.integers(len(pool_b))]
                if a[1] == b[1]:
                    continue
                key = tuple(sorted((a[0], b[0]))) if kin.same_role else (a[0], b[0])
                if key in seen:
                    continue
                seen.add(key)
                chosen.append((a, b))
        out.extend(PairSample(a[0], b[0], kin, 0, a[1], b[1], a[2], b[2]) for a, b in chosen)
    return out


def balanced_pairs(dataset: KinshipDataset, classes: Sequence[KinshipClass], seed: int) -> list:
    """Positives of every class plus an equal number of sampled negatives."""
    out = []
    for kin in classes:
        pos = enumerate_positive_pairs(dataset, kin)
        if not pos:
            continue
        out.extend(pos)
        out.extend(sample_negatives(pos, dataset, derive_seed(seed, "negatives", kin.tag)))
    return out
