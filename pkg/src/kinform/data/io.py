"""File formats: binary PPM images, KTNS embedding sidecars, family trees, pair lists.

Family tree: one member per line,
``family_id<TAB>member_id<TAB>role<TAB>image_path[;image_path...]``.
Pair list: CSV ``image_a,image_b,class,label`` with an optional header row.
Image paths are relative to the directory holding the tree or pair file and
double as the image reference inside the dataset.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..autograd.serialize import FormatError, array_from_bytes, tensor_to_bytes
from .dataset import DatasetError, KinshipDataset, MissingImagesError
from .kinship import ROLES, Family, ImageRecord, KinshipClass, Member, PairSample

TREE_FILE = "families.tsv"


# -- images -----------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) 8-bit PPM into an ``(H, W, 3)`` uint8 array."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: only binary P6 PPM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM (maxval 255) is supported")
    pos += 1
    payload = data[pos:pos + width * height * 3]
    if len(payload) != width * height * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_image(root: Path, ref: str) -> ImageRecord:
    path = root / ref
    if ref.endswith(".ppm"):
        return ImageRecord(ref, pixels=read_ppm(path))
    if ref.endswith(".ktns"):
        arr, _ = array_from_bytes(path.read_bytes())
        if arr.ndim != 1:
            raise FormatError(f"{path}: embedding sidecar must be rank 1, got {arr.shape}")
        return ImageRecord(ref, embedding=arr)
    raise FormatError(f"{ref}: unsupported image type (expected .ppm or .ktns)")


def write_image(root: Path, rec: ImageRecord) -> None:
    path = root / rec.ref
    path.parent.mkdir(parents=True, exist_ok=True)
    if rec.is_embedding:
        path.write_bytes(tensor_to_bytes(rec.embedding))
    else:
        write_ppm(path, rec.pixels)


def _load_images(root: Path, refs: Iterable[str]) -> dict:
    refs = list(dict.fromkeys(refs))
    missing = [r for r in refs if not (root / r).is_file()]
    if missing:
        raise MissingImagesError(missing)
    return {r: read_image(root, r) for r in refs}


# -- family trees -----------------------------------------------------------

def _tree_path(path) -> Path:
    p = Path(path)
    return p / TREE_FILE if p.is_dir() else p


def load_family_tree(path) -> KinshipDataset:
    """Parse a tab-separated family tree and load every referenced image."""
    tree = _tree_path(path)
    root = tree.parent
    order, members, seen = [], {}, set()
    with open(tree, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise DatasetError(f"{tree}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
            fid, mid, role, paths = cols
            if not fid or not mid:
                raise DatasetError(f"{tree}:{lineno}: empty family_id or member_id")
            if role not in ROLES:
                raise DatasetError(f"{tree}:{lineno}: unknown role {role!r}")
            if mid in seen:
                raise DatasetError(f"{tree}:{lineno}: duplicate member_id {mid!r}")
            seen.add(mid)
            refs = tuple(p for p in paths.split(";") if p)
            if fid not in members:
                order.append(fid)
                members[fid] = []
            members[fid].append(Member(mid, fid, role, refs))
    images = _load_images(root, (r for fid in order for m in members[fid] for r in m.image_refs))
    return KinshipDataset([Family(fid, tuple(members[fid])) for fid in order], images)


def export_family_tree(dataset: KinshipDataset, out_dir) -> Path:
    """Write the tree file plus one PPM or KTNS sidecar per image."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for fam in dataset.families:
        for m in fam.members:
            lines.append("\t".join((fam.family_id, m.member_id, m.role, ";".join(m.image_refs))))
            for ref in m.image_refs:
                write_image(root, dataset.images[ref])
    tree = root / TREE_FILE
    tree.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return tree


# -- pair lists -------------------------------------------------------------

class PairList(list):
    """A list of PairSample that also carries the images it references."""

    def __init__(self, pairs: Sequence[PairSample] = (), images: dict | None = None):
        super().__init__(pairs)
        self.images = images or {}


def load_pair_list(path, load_images: bool = True) -> PairList:
    path = Path(path)
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == ["image_a", "image_b", "class", "label"]:
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 comma-separated columns, got {len(row)}")
            a, b, tag, label = (c.strip() for c in row)
            try:
                kin = KinshipClass.parse(tag)
            except ValueError as err:
                raise DatasetError(f"{path}:{lineno}: {err}") from None
            if label not in ("0", "1"):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            pairs.append(PairSample(a, b, kin, int(label)))
    images = _load_images(path.parent, (r for p in pairs for r in (p.image_a, p.image_b))) if load_images else {}
    return PairList(pairs, images)


def export_pair_list(pairs: Sequence[PairSample], path, images: dict | None = None) -> Path:
    """Write a pair CSV; with ``images``, also write the referenced sidecars next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_a", "image_b", "class", "label"])
        for p in pairs:
            writer.writerow([p.image_a, p.image_b, p.kin.tag, p.label])
    if images:
        for ref in dict.fromkeys(r for p in pairs for r in (p.image_a, p.image_b)):
            write_image(path.parent, images[ref])
    return path


def is_dataset_dir(path) -> bool:
    return os.path.isfile(_tree_path(path))
