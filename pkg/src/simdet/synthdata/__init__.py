"""Seeded synthetic detection data with a controllable domain gap."""

from simdet.synthdata.dataset import Manifest, ManifestRow, generate_dataset, sample_subset, split_half
from simdet.synthdata.io import (
    ClassRangeError,
    load_image,
    read_annotations,
    read_ppm,
    write_annotations,
    write_ppm,
)
from simdet.synthdata.mosaic import QuadrantMap, mosaic, mosaic_layout
from simdet.synthdata.scene import (
    CLASS_NAMES,
    NEUTRAL,
    REAL,
    VIRTUAL,
    DomainProfile,
    Scene,
    generate_scene,
    get_profile,
)

__all__ = [
    "CLASS_NAMES",
    "ClassRangeError",
    "DomainProfile",
    "Manifest",
    "ManifestRow",
    "NEUTRAL",
    "QuadrantMap",
    "REAL",
    "Scene",
    "VIRTUAL",
    "generate_dataset",
    "generate_scene",
    "get_profile",
    "load_image",
    "mosaic",
    "mosaic_layout",
    "read_annotations",
    "read_ppm",
    "sample_subset",
    "split_half",
    "write_annotations",
    "write_ppm",
]
