from .dataset import (
    DatasetError,
    KinshipDataset,
    MissingImagesError,
    balanced_pairs,
    enumerate_positive_pairs,
    family_member_pairs,
    family_pair_count,
    sample_negatives,
)
from .io import (
    PairList,
    export_family_tree,
    export_pair_list,
    load_family_tree,
    load_pair_list,
    read_ppm,
    write_ppm,
)
from .kinship import (
    ALL_CLASSES,
    GRANDPARENT_CLASSES,
    ROLES,
    TRAINED_CLASSES,
    Family,
    ImageRecord,
    KinshipClass,
    Member,
    PairSample,
)
from .synthetic import SyntheticConfig, generate_synthetic

__all__ = [
    "ALL_CLASSES",
    "DatasetError",
    "Family",
    "GRANDPARENT_CLASSES",
    "ImageRecord",
    "KinshipClass",
    "KinshipDataset",
    "Member",
    "MissingImagesError",
    "PairList",
    "PairSample",
    "ROLES",
    "SyntheticConfig",
    "TRAINED_CLASSES",
    "balanced_pairs",
    "enumerate_positive_pairs",
    "export_family_tree",
    "export_pair_list",
    "family_member_pairs",
    "family_pair_count",
    "generate_synthetic",
    "load_family_tree",
    "load_pair_list",
    "read_ppm",
    "sample_negatives",
    "write_ppm",
]
