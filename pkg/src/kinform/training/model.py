"""The full verifier: a siamese backbone (or one per class) plus one head per kinship class."""

from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import numpy as np

from ..autograd import Tensor
from ..backbone import Backbone, BackboneConfig
from ..data.kinship import KinshipClass, PairSample
from ..fusion import FusionHead, HeadConfig
from ..seeding import derive_seed
from .config import TrainConfig

SHARED = "shared"


def cosine_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return (a * b).sum(axis=1) / np.maximum(na * nb, 1e-300)


class KinshipModel:
    def __init__(self, config: TrainConfig, input_mode: str, input_dim: int = 0, n_identities: int = 1):
        self.config = config
        self.input_mode = input_mode
        self.input_dim = input_dim
        self.n_identities = max(1, n_identities)
        classes = config.kin_classes
        if config.backbone == "full":
            bcfg = BackboneConfig.full(n_identities=self.n_identities, margin=config.margin)
        else:
            bcfg = BackboneConfig.tiny(input_size=config.input_size, embed_dim=config.embed_dim,
                                       n_identities=self.n_identities, margin=config.margin)
        if input_mode == "embedding":
            bcfg = BackboneConfig.for_embeddings(input_dim, embed_dim=bcfg.embed_dim,
                                                 n_identities=self.n_identities, margin=config.margin)
        self.backbone_config = bcfg
        groups = [SHARED] if config.multitask else [k.tag for k in classes]
        self.backbones = OrderedDict(
            (g, Backbone(bcfg, seed=derive_seed(config.seed, "backbone", g))) for g in groups
        )
        self.heads: "OrderedDict[KinshipClass, FusionHead]" = OrderedDict()
        self.thresholds: dict = {}
        if config.fusion != "embedding":
            for kin in classes:
                hcfg = HeadConfig.for_class(kin, config.weighting, embed_dim=bcfg.embed_dim, channels=config.channels,
                                            hidden_layers=config.hidden_layers, fusion=config.fusion)
                self.heads[kin] = FusionHead(kin, hcfg, seed=derive_seed(config.seed, "head", kin.tag))

    @property
    def classes(self) -> tuple:
        return self.config.kin_classes

    def group_of(self, kin: KinshipClass) -> str:
        return SHARED if self.config.multitask else kin.tag

    def backbone_for(self, kin: KinshipClass) -> Backbone:
        return self.backbones[self.group_of(kin)]

    def has_head(self, kin: KinshipClass) -> bool:
        if self.config.fusion == "embedding":
            return kin in self.thresholds
        return kin in self.heads

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for g, bb in self.backbones.items():
            for n, t in bb.params.items():
                out[f"backbone/{g}/{n}"] = t
        for kin, head in self.heads.items():
            for n, t in head.params.items():
                out[f"head/{kin.tag}/{n}"] = t
        return out

    def parameters(self) -> list:
        return list(self.named_tensors().values())

    # -- inference ------------------------------------------------------------

    def _inputs(self, refs: Sequence[str], images: dict, backbone: Backbone):
        return backbone.prepare([images[r] for r in refs])

    def embed_refs(self, refs: Sequence[str], images: dict, kin: KinshipClass) -> np.ndarray:
        bb = self.backbone_for(kin)
        return bb.forward(self._inputs(refs, images, bb)).data

    def score_pairs(self, pairs: Sequence[PairSample], images: dict, batch_size: int = 1024) -> np.ndarray:
        """Scores per pair: head probability, or cosine similarity for embedding-only models."""
        scores = np.zeros(len(pairs))
        by_class: dict = {}
        for i, p in enumerate(pairs):
            by_class.setdefault(p.kin, []).append(i)
        for kin, idx in by_class.items():
            if not self.has_head(kin):
                scores[idx] = np.nan
                continue
            for s in range(0, len(idx), batch_size):
                chunk = idx[s:s + batch_size]
                a = self.embed_refs([pairs[i].image_a for i in chunk], images, kin)
                b = self.embed_refs([pairs[i].image_b for i in chunk], images, kin)
                if self.config.fusion == "embedding":
                    scores[chunk] = cosine_scores(a, b)
                else:
                    scores[chunk] = self.heads[kin].score(Tensor(a), Tensor(b)).data
        return scores

    def decision_thresholds(self, pairs: Sequence[PairSample], default: float = 0.5) -> np.ndarray:
        if self.config.fusion != "embedding":
            return np.full(len(pairs), default)
        return np.array([self.thresholds.get(p.kin, np.nan) for p in pairs])

    def calibrate_thresholds(self, pairs: Sequence[PairSample], images: dict) -> dict:
        """Pick, per class, the cosine threshold that maximizes accuracy on ``pairs``."""
        self.thresholds = {}
        scores = self._raw_cosines(pairs, images)
        labels = np.array([p.label for p in pairs])
        kins = np.array([p.kin.tag for p in pairs])
        for kin in self.classes:
            sel = kins == kin.tag
            if sel.any():
                self.thresholds[kin] = best_threshold(scores[sel], labels[sel])
        return self.thresholds

    def _raw_cosines(self, pairs, images) -> np.ndarray:
        out = np.zeros(len(pairs))
        by_class: dict = {}
        for i, p in enumerate(pairs):
            by_class.setdefault(p.kin, []).append(i)
        for kin, idx in by_class.items():
            a = self.embed_refs([pairs[i].image_a for i in idx], images, kin)
            b = self.embed_refs([pairs[i].image_b for i in idx], images, kin)
            out[idx] = cosine_scores(a, b)
        return out


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold t maximizing accuracy of ``scores >= t``; midpoint between neighbours, ties to the lowest."""
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    n = len(s)
    # predicting positive for s[i:] ; accuracy = negatives below + positives at/above
    neg_below = np.concatenate([[0], np.cumsum(y == 0)])
    pos_above = np.concatenate([np.cumsum((y == 1)[::-1])[::-1], [0]])
    acc = neg_below + pos_above
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = s[1:] != s[:-1]
    i = int(np.argmax(np.where(valid, acc, -1)))
    if i == 0:
        return float(s[0] - 1e-9) if n else 0.0
    if i == n:
        return float(s[-1] + 1e-9)
    return float((s[i - 1] + s[i]) / 2.0)
