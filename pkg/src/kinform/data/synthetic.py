"""Synthetic families with a learnable latent kinship structure.

Each family draws a latent vector from the population; each member is the
family latent plus a shared role offset plus member noise; each observed
embedding is the member latent plus observation noise, followed by optional
nuisance coordinates that carry no identity information. Optional traits add
identity-specific coordinates that are not inherited, and a sex-linked flip
makes female members express part of the latent with opposite sign, so
cross-sex relatives agree only after a side-specific reweighting.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import DatasetError, KinshipDataset
from .kinship import Family, ImageRecord, Member

PROFILES = ("uniform", "rfiw-like")


@dataclass(frozen=True)
class SyntheticConfig:
    n_families: int = 120
    fathers: tuple = (1, 1)
    mothers: tuple = (1, 1)
    sons: tuple = (0, 3)
    daughters: tuple = (0, 3)
    grandfathers: tuple = (0, 0)
    grandmothers: tuple = (0, 0)
    images_per_member: tuple = (1, 4)
    latent_dim: int = 16
    nuisance_dim: int = 0
    # per-member traits: identity-specific, not inherited
    trait_dim: int = 0
    trait_spread: float = 1.0
    # female members express the first ``sex_flip_dims`` latent coordinates with flipped sign
    sex_flip_dims: int = 0
    kin_noise: float = 0.4
    pop_spread: float = 1.0
    obs_noise: float = 0.3
    nuisance_noise: float = 1.0
    role_offset: float = 0.3
    imbalance_profile: str = "uniform"
    # rfiw-like: per-family image multiplier ~ lognormal(0, richness_sigma)
    richness_sigma: float = 1.2
    max_images_per_member: int = 80

    def validate(self) -> None:
        if self.n_families < 1:
            raise DatasetError("n_families must be positive")
        for name in ("fathers", "mothers", "sons", "daughters", "grandfathers", "grandmothers", "images_per_member"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise DatasetError(f"invalid range {name}={lo, hi}")
        if self.images_per_member[0] < 1:
            raise DatasetError("images_per_member must start at 1 or more")
        if self.latent_dim < 1 or self.nuisance_dim < 0 or self.trait_dim < 0:
            raise DatasetError("latent_dim must be positive, nuisance_dim and trait_dim non-negative")
        if not 0 <= self.sex_flip_dims <= self.latent_dim:
            raise DatasetError(f"sex_flip_dims must lie in [0, latent_dim], got {self.sex_flip_dims}")
        if not 0 <= self.kin_noise < self.pop_spread:
            raise DatasetError(f"need 0 <= kin_noise < pop_spread, got {self.kin_noise} and {self.pop_spread}")
        if min(self.obs_noise, self.nuisance_noise, self.role_offset, self.trait_spread) < 0:
            raise DatasetError("noise scales must be non-negative")
        if self.imbalance_profile not in PROFILES:
            raise DatasetError(f"imbalance_profile must be one of {PROFILES}")

    def to_dict(self) -> dict:
        return asdict(self)


FEMALE_ROLES = frozenset({"M", "D", "GM"})
_ROLE_FIELDS = (("F", "fathers"), ("M", "mothers"), ("S", "sons"), ("D", "daughters"), ("GF", "grandfathers"), ("GM", "grandmothers"))


def generate_synthetic(config: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> KinshipDataset:
    config.validate()
    rng = np.random.default_rng(seed)
    dim = config.latent_dim
    offsets = {role: rng.normal(0.0, config.role_offset, dim) for role, _ in _ROLE_FIELDS}
    families, images = [], {}
    for fi in range(config.n_families):
        fid = f"F{fi + 1:04d}"
        z = rng.normal(0.0, config.pop_spread, dim)
        richness = 1.0
        if config.imbalance_profile == "rfiw-like":
            richness = float(rng.lognormal(0.0, config.richness_sigma))
        members = []
        for role, field_name in _ROLE_FIELDS:
            lo, hi = getattr(config, field_name)
            for j in range(int(rng.integers(lo, hi + 1))):
                mid = f"{fid}.{role}{j + 1}"
                latent = z + offsets[role] + rng.normal(0.0, config.kin_noise, dim)
                if role in FEMALE_ROLES and config.sex_flip_dims:
                    latent[:config.sex_flip_dims] *= -1.0
                if config.trait_dim:
                    latent = np.concatenate([latent, rng.normal(0.0, config.trait_spread, config.trait_dim)])
                lo_i, hi_i = config.images_per_member
                n_img = int(rng.integers(lo_i, hi_i + 1))
                if richness != 1.0:
                    n_img = int(min(config.max_images_per_member, max(1, round(n_img * richness))))
                refs = []
                for k in range(n_img):
                    ref = f"{fid}/{mid}/{k + 1:03d}.ktns"
                    obs = latent + rng.normal(0.0, config.obs_noise, latent.size)
                    if config.nuisance_dim:
                        obs = np.concatenate([obs, rng.normal(0.0, config.nuisance_noise, config.nuisance_dim)])
                    images[ref] = ImageRecord(ref, embedding=obs)
                    refs.append(ref)
                members.append(Member(mid, fid, role, tuple(refs)))
        families.append(Family(fid, tuple(members)))
    return KinshipDataset(families, images)
