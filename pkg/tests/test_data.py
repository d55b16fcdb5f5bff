import itertools

import numpy as np
import pytest

from kinform.autograd.serialize import FormatError
from kinform.data import (
    ALL_CLASSES,
    TRAINED_CLASSES,
    DatasetError,
    Family,
    ImageRecord,
    KinshipClass,
    KinshipDataset,
    Member,
    MissingImagesError,
    SyntheticConfig,
    balanced_pairs,
    enumerate_positive_pairs,
    export_family_tree,
    export_pair_list,
    generate_synthetic,
    load_family_tree,
    load_pair_list,
    read_ppm,
    sample_negatives,
    write_ppm,
)


def emb(ref, v=0.0, d=4):
    return ImageRecord(ref, embedding=np.full(d, float(v)))


def make_family(fid, roster):
    """``roster`` is a list of (role, n_images)."""
    members, images = [], {}
    counts = {}
    for role, n in roster:
        counts[role] = counts.get(role, 0) + 1
        mid = f"{fid}.{role}{counts[role]}"
        refs = tuple(f"{fid}/{mid}/{k}.ktns" for k in range(n))
        images.update({r: emb(r, len(images)) for r in refs})
        members.append(Member(mid, fid, role, refs))
    return Family(fid, tuple(members)), images


def make_dataset(*rosters):
    fams, images = [], {}
    for i, roster in enumerate(rosters):
        fam, imgs = make_family(f"F{i}", roster)
        fams.append(fam)
        images.update(imgs)
    return KinshipDataset(fams, images)


def brute_force_count(ds, kin):
    """Independent enumeration: every ordered member pair, then dedupe same-role pairs."""
    ra, rb = kin.roles
    seen = set()
    for fam in ds.families:
        for a, b in itertools.product(fam.members, repeat=2):
            if a.member_id == b.member_id or a.role != ra or b.role != rb:
                continue
            for ia, ib in itertools.product(a.image_refs, b.image_refs):
                seen.add(frozenset((ia, ib)) if ra == rb else (ia, ib))
    return len(seen)


# -- kinship classes ----------------------------------------------------------

def test_symmetric_flags():
    sym = {k.tag for k in ALL_CLASSES if k.symmetric}
    assert sym == {"BB", "SS", "FS", "MD"}
    assert len(TRAINED_CLASSES) == 7


@pytest.mark.parametrize("text,tag", [("fs", "FS"), ("F-D", "FD"), (" sibs ", "SIBS"), ("GM-GS", "GMGS")])
def test_parse_tags(text, tag):
    assert KinshipClass.parse(text).tag == tag


def test_parse_unknown():
    with pytest.raises(ValueError, match="unknown kinship class"):
        KinshipClass.parse("XY")


def test_image_record_needs_one_payload():
    with pytest.raises(ValueError):
        ImageRecord("a")
    with pytest.raises(ValueError):
        ImageRecord("a", pixels=np.zeros((2, 2, 3), np.float32))


# -- dataset validation -------------------------------------------------------

def test_dangling_image_lists_missing():
    fam = Family("F", (Member("F.S1", "F", "S", ("x.ktns", "y.ktns")),))
    with pytest.raises(MissingImagesError) as err:
        KinshipDataset([fam], {"x.ktns": emb("x.ktns")})
    assert err.value.missing == ["y.ktns"]


def test_duplicate_member_rejected():
    a = Family("A", (Member("m", "A", "S"),))
    b = Family("B", (Member("m", "B", "S"),))
    with pytest.raises(DatasetError, match="duplicate member_id"):
        KinshipDataset([a, b], {})


def test_member_family_mismatch():
    with pytest.raises(DatasetError, match="filed under"):
        KinshipDataset([Family("A", (Member("m", "B", "S"),))], {})


# -- positive pairs -----------------------------------------------------------

def test_father_son_product():
    ds = make_dataset([("F", 2), ("S", 3)])
    pairs = enumerate_positive_pairs(ds, KinshipClass.FS)
    assert len(pairs) == 6
    assert all(p.label == 1 and p.family_a == p.family_b == "F0" for p in pairs)


def test_brothers_unordered():
    ds = make_dataset([("S", 1), ("S", 1)])
    assert len(enumerate_positive_pairs(ds, "BB")) == 1


def test_unknown_class_tag():
    ds = make_dataset([("S", 1)])
    with pytest.raises(ValueError):
        enumerate_positive_pairs(ds, "QQ")


def test_two_minimal_families():
    ds = generate_synthetic(SyntheticConfig(n_families=2, sons=(1, 1), daughters=(1, 1), images_per_member=(1, 1)), 0)
    per_family = {k.tag: len(enumerate_positive_pairs(ds, k)) / 2 for k in TRAINED_CLASSES}
    assert per_family == {"BB": 0, "SS": 0, "SIBS": 1, "FD": 1, "FS": 1, "MD": 1, "MS": 1}


@pytest.mark.parametrize("kin", TRAINED_CLASSES, ids=lambda k: k.tag)
def test_counts_match_brute_force(kin):
    ds = generate_synthetic(SyntheticConfig(), 7)
    pairs = enumerate_positive_pairs(ds, kin)
    assert len(pairs) == brute_force_count(ds, kin)
    assert len(pairs) == sum(ds.pair_counts(kin).values())


def test_total_pairs_seed7_pinned():
    ds = generate_synthetic(SyntheticConfig(), 7)
    assert sum(brute_force_count(ds, k) for k in TRAINED_CLASSES) == 8412


# -- negatives ----------------------------------------------------------------

def test_negatives_match_pattern(small_dataset):
    pos = enumerate_positive_pairs(small_dataset, KinshipClass.FS)[:100]
    assert len(pos) == 100
    neg = sample_negatives(pos, small_dataset, seed=5)
    assert len(neg) == 100
    for p in neg:
        assert p.label == 0 and p.kin is KinshipClass.FS
        assert p.family_a != p.family_b
        assert small_dataset.member(p.member_a).role == "F"
        assert small_dataset.member(p.member_b).role == "S"


def test_negatives_deterministic(small_dataset):
    pos = enumerate_positive_pairs(small_dataset, KinshipClass.SIBS)
    assert sample_negatives(pos, small_dataset, 9) == sample_negatives(pos, small_dataset, 9)
    assert sample_negatives(pos, small_dataset, 9) != sample_negatives(pos, small_dataset, 10)


def test_negatives_no_repeats_when_possible(small_dataset):
    pos = enumerate_positive_pairs(small_dataset, KinshipClass.BB)
    neg = sample_negatives(pos, small_dataset, 1)
    keys = {frozenset((p.image_a, p.image_b)) for p in neg}
    assert len(keys) == len(neg)


def test_single_family_negatives_error():
    ds = make_dataset([("F", 1), ("S", 2)])
    with pytest.raises(DatasetError, match="cross-family"):
        sample_negatives(enumerate_positive_pairs(ds, "FS"), ds, 0)


def test_balanced_pairs_even(small_dataset):
    pairs = balanced_pairs(small_dataset, TRAINED_CLASSES, 0)
    for kin in TRAINED_CLASSES:
        labels = [p.label for p in pairs if p.kin is kin]
        assert labels and sum(labels) * 2 == len(labels)


# -- synthetic generator ------------------------------------------------------

def test_rfiw_like_heavy_tail():
    ds = generate_synthetic(SyntheticConfig(n_families=300, imbalance_profile="rfiw-like"), 42)
    per_family = np.array([sum(len(m.image_refs) for m in f.members) for f in ds.families])
    # measured once on this generator
    assert per_family.max() == 384
    assert per_family.mean() == pytest.approx(26.72)
    assert per_family.std() == pytest.approx(43.419, abs=1e-3)
    assert per_family.std() / per_family.mean() > 1


def test_zero_kin_noise_members_share_latent():
    cfg = SyntheticConfig(n_families=3, kin_noise=0.0, role_offset=0.0, obs_noise=0.0)
    ds = generate_synthetic(cfg, 1)
    for fam in ds.families:
        vecs = [ds.images[r].embedding for m in fam.members for r in m.image_refs]
        assert all(np.array_equal(v, vecs[0]) for v in vecs)


def test_generator_deterministic():
    a = generate_synthetic(SyntheticConfig(n_families=5, trait_dim=3), 4)
    b = generate_synthetic(SyntheticConfig(n_families=5, trait_dim=3), 4)
    assert a == b
    assert a.embedding_dim == 16 + 3


@pytest.mark.parametrize("bad", [
    dict(n_families=0), dict(sons=(2, 1)), dict(images_per_member=(0, 2)), dict(kin_noise=2.0),
    dict(obs_noise=-1.0), dict(imbalance_profile="zipf"), dict(trait_dim=-1),
])
def test_invalid_ranges(bad):
    with pytest.raises(DatasetError):
        generate_synthetic(SyntheticConfig(**bad), 0)


# -- files --------------------------------------------------------------------

def test_tree_round_trip(tmp_path, tiny_families):
    export_family_tree(tiny_families, tmp_path)
    assert load_family_tree(tmp_path) == tiny_families


def test_tree_round_trip_pixels(tmp_path):
    rng = np.random.default_rng(0)
    refs = ("a/1.ppm", "a/2.ppm")
    images = {r: ImageRecord(r, pixels=rng.integers(0, 256, (3, 5, 3), dtype=np.uint8)) for r in refs}
    ds = KinshipDataset([Family("A", (Member("A.F1", "A", "F", refs[:1]), Member("A.S1", "A", "S", refs[1:])))], images)
    export_family_tree(ds, tmp_path)
    back = load_family_tree(tmp_path / "families.tsv")
    assert back == ds and back.input_mode == "pixels"


def test_tree_duplicate_member(tmp_path):
    (tmp_path / "families.tsv").write_text("A\tm1\tF\t\nA\tm1\tS\t\n")
    with pytest.raises(DatasetError, match=":2: duplicate member_id"):
        load_family_tree(tmp_path)


def test_tree_malformed_row_line_number(tmp_path):
    (tmp_path / "families.tsv").write_text("# header\nA\tm1\tF\t\nA\tm2\n")
    with pytest.raises(DatasetError, match=":3: expected 4"):
        load_family_tree(tmp_path)


def test_tree_unknown_role(tmp_path):
    (tmp_path / "families.tsv").write_text("A\tm1\tX\t\n")
    with pytest.raises(DatasetError, match="unknown role"):
        load_family_tree(tmp_path)


def test_tree_dangling_path(tmp_path):
    (tmp_path / "families.tsv").write_text("A\tm1\tF\tgone.ktns;also.ktns\n")
    with pytest.raises(MissingImagesError) as err:
        load_family_tree(tmp_path)
    assert err.value.missing == ["gone.ktns", "also.ktns"]


def test_pair_list_three_rows(tmp_path):
    path = tmp_path / "pairs.csv"
    path.write_text("image_a,image_b,class,label\na,b,FS,1\nc,d,f-d,0\ne,f,sibs,1\n")
    pairs = load_pair_list(path, load_images=False)
    assert [(p.kin.tag, p.label) for p in pairs] == [("FS", 1), ("FD", 0), ("SIBS", 1)]


@pytest.mark.parametrize("row,msg", [("a,b,FS", "expected 4"), ("a,b,ZZ,1", "unknown kinship"), ("a,b,FS,2", "label")])
def test_pair_list_bad_row(tmp_path, row, msg):
    path = tmp_path / "pairs.csv"
    path.write_text("a,b,MD,1\n" + row + "\n")
    with pytest.raises(DatasetError, match=f":2: .*{msg}"):
        load_pair_list(path, load_images=False)


def test_pair_list_round_trip(tmp_path, tiny_families):
    pairs = balanced_pairs(tiny_families, TRAINED_CLASSES, 0)
    path = export_pair_list(pairs, tmp_path / "out" / "pairs.csv", tiny_families.images)
    back = load_pair_list(path)
    assert [(p.image_a, p.image_b, p.kin, p.label) for p in back] == [(p.image_a, p.image_b, p.kin, p.label) for p in pairs]
    assert all(back.images[r] == tiny_families.images[r] for r in back.images)


def test_ppm_round_trip(tmp_path):
    px = np.random.default_rng(2).integers(0, 256, (4, 6, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", px)
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), px)


def test_ppm_header_comment(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 2\n255\n" + px.tobytes())
    assert np.array_equal(read_ppm(tmp_path / "c.ppm"), px)


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n0 0 0", b"P6\n1 1\n65535\n" + bytes(6), b"P6\n2 2\n255\n" + bytes(5)])
def test_ppm_rejects(tmp_path, blob):
    (tmp_path / "bad.ppm").write_bytes(blob)
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "bad.ppm")
