"""Kinship classes, member roles and the core record types."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ROLES = ("F", "M", "S", "D", "GF", "GM", "other")


class KinshipClass(enum.Enum):
    """A kinship relation between two people, with its side roles.

    ``roles`` gives the member role expected on the left and right input.
    ``symmetric`` marks the gender-symmetric classes, whose heads tie the
    left/right weighting.
    """

    BB = ("BB", ("S", "S"), True)
    SS = ("SS", ("D", "D"), True)
    SIBS = ("SIBS", ("S", "D"), False)
    FD = ("FD", ("F", "D"), False)
    FS = ("FS", ("F", "S"), True)
    MD = ("MD", ("M", "D"), True)
    MS = ("MS", ("M", "S"), False)
    GFGD = ("GFGD", ("GF", "D"), False)
    GFGS = ("GFGS", ("GF", "S"), False)
    GMGD = ("GMGD", ("GM", "D"), False)
    GMGS = ("GMGS", ("GM", "S"), False)

    def __init__(self, tag, roles, symmetric):
        self.tag = tag
        self.roles = roles
        self.symmetric = symmetric

    @property
    def same_role(self) -> bool:
        return self.roles[0] == self.roles[1]

    @property
    def grandparent(self) -> bool:
        return self.tag.startswith("G")

    @classmethod
    def parse(cls, tag: str) -> "KinshipClass":
        key = tag.strip().upper().replace("-", "")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown kinship class {tag!r}") from None

    def __repr__(self) -> str:
        return f"KinshipClass.{self.tag}"


# canonical head order
TRAINED_CLASSES = (
    KinshipClass.BB,
    KinshipClass.SS,
    KinshipClass.SIBS,
    KinshipClass.FD,
    KinshipClass.FS,
    KinshipClass.MD,
    KinshipClass.MS,
)
GRANDPARENT_CLASSES = (KinshipClass.GFGD, KinshipClass.GFGS, KinshipClass.GMGD, KinshipClass.GMGS)
ALL_CLASSES = TRAINED_CLASSES + GRANDPARENT_CLASSES


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """Either an 8-bit RGB pixel payload or a precomputed embedding vector."""

    ref: str
    pixels: Optional[np.ndarray] = None
    embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.pixels is None) == (self.embedding is None):
            raise ValueError(f"image {self.ref!r}: exactly one of pixels/embedding must be set")
        if self.pixels is not None:
            if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
                raise ValueError(f"image {self.ref!r}: pixels must be HxWx3 uint8")

    @property
    def is_embedding(self) -> bool:
        return self.embedding is not None

    @property
    def width(self) -> int:
        return self.pixels.shape[1] if self.pixels is not None else 0

    @property
    def height(self) -> int:
        return self.pixels.shape[0] if self.pixels is not None else 0

    @property
    def channels(self) -> int:
        return 3 if self.pixels is not None else 0

    def __eq__(self, other):
        if not isinstance(other, ImageRecord) or self.ref != other.ref:
            return False
        mine = self.pixels if self.pixels is not None else self.embedding
        theirs = other.pixels if other.pixels is not None else other.embedding
        return self.is_embedding == other.is_embedding and np.array_equal(mine, theirs)

    def __hash__(self):
        return hash(self.ref)


@dataclass(frozen=True)
class Member:
    member_id: str
    family_id: str
    role: str
    image_refs: tuple = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"member {self.member_id!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class Family:
    family_id: str
    members: tuple = field(default_factory=tuple)

    def with_role(self, role: str) -> list:
        return [m for m in self.members if m.role == role]


@dataclass(frozen=True)
class PairSample:
    """Two image references, the kinship class they are tested for, and a label."""

    image_a: str
    image_b: str
    kin: KinshipClass
    label: int
    family_a: Optional[str] = None
    family_b: Optional[str] = None
    member_a: Optional[str] = None
    member_b: Optional[str] = None

    @property
    def positive(self) -> bool:
        return self.label == 1
