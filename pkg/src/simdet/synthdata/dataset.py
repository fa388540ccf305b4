"""Datasets on disk: generation, manifests, stratified subsampling and splits."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from simdet.errors import FormatError, InvalidInputError
from simdet.geometry import BBox
from simdet.rng import SplitMix, derive
from simdet.synthdata.io import class_counts, load_image, read_annotations, to_uint8, write_annotations, write_ppm
from simdet.synthdata.scene import DomainProfile, generate_scene

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["path", "annotation_path", "num_objects", "counts_per_class"]
STRATIFY_TOLERANCE = 0.02


@dataclass(frozen=True)
class ManifestRow:
    image: Path
    annotation: Path
    num_objects: int
    counts: tuple[int, ...]


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def num_classes(self) -> int:
        return len(self.rows[0].counts) if self.rows else 0

    def class_totals(self) -> np.ndarray:
        if not self.rows:
            return np.zeros(0, dtype=np.int64)
        return np.sum([r.counts for r in self.rows], axis=0)

    def subset(self, indices) -> "Manifest":
        return Manifest([self.rows[i] for i in sorted(int(i) for i in indices)])

    def image_set(self) -> set[Path]:
        return {r.image for r in self.rows}

    # -- CSV ------------------------------------------------------------------

    def to_csv(self, base: Path) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in self.rows:
            writer.writerow([
                Path(os.path.relpath(r.image, base)).as_posix(),
                Path(os.path.relpath(r.annotation, base)).as_posix(),
                r.num_objects,
                ";".join(str(c) for c in r.counts),
            ])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path).resolve()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(path.parent), encoding="utf-8", newline="")
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path).resolve()
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read manifest {path}: {exc}") from exc
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: bad manifest header {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 4:
                raise FormatError(f"{path}: line {lineno}: expected 4 columns")
            try:
                counts = tuple(int(c) for c in rec[3].split(";")) if rec[3] else ()
                rows.append(ManifestRow((path.parent / rec[0]).resolve(), (path.parent / rec[1]).resolve(), int(rec[2]), counts))
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
        return cls(rows)

    # -- loading ----------------------------------------------------------------

    def load(self) -> tuple[np.ndarray, list[list[tuple[int, BBox]]]]:
        """All images as ``(N, H, W, 3)`` float32 plus their annotations."""
        images = []
        labels = []
        for r in self.rows:
            try:
                images.append(load_image(r.image))
            except OSError as exc:
                raise OSError(f"cannot read image {r.image}: {exc}") from exc
            labels.append(read_annotations(r.annotation, self.num_classes or None))
        return np.stack(images) if images else np.zeros((0, 0, 0, 3), np.float32), labels


def generate_dataset(
    seed: int,
    n: int,
    profile: DomainProfile,
    out_dir,
    K: int = 7,
    max_objects: int = 4,
    size: int = 64,
    class_weights=None,
    style: str = "ppe",
) -> Manifest:
    """Write ``n`` scenes under ``out_dir`` and return (and write) their manifest.

    Scene ``i`` is generated from ``derive(seed, i)``, so any single scene
    can be regenerated without the others.
    """
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    out = Path(out_dir).resolve()
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    width = max(5, len(str(n - 1)))
    rows = []
    for i in range(n):
        scene = generate_scene(derive(seed, i), profile, K, max_objects, size, class_weights, style)
        img_path = out / "images" / f"scene_{i:0{width}d}.ppm"
        ann_path = out / "labels" / f"scene_{i:0{width}d}.txt"
        write_ppm(img_path, to_uint8(scene.image))
        write_annotations(ann_path, scene.annotations)
        rows.append(ManifestRow(img_path, ann_path, len(scene.annotations), tuple(class_counts(scene.annotations, K))))
    manifest = Manifest(rows)
    manifest.write(out / "manifest.csv")
    return manifest


def _share_deviation(counts: np.ndarray, target_share: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return float(target_share.max()) if target_share.size else 0.0
    return float(np.abs(counts / total - target_share).max())


def sample_subset(manifest: Manifest, n: int, seed: int, tolerance: float = STRATIFY_TOLERANCE) -> Manifest:
    """Random ``n``-image subset whose class shares stay within ``tolerance`` of the parent.

    Candidates are drawn uniformly; when none meets the tolerance the best
    one is refined by random swaps. If the tolerance is infeasible the
    closest subset found is returned and a warning is logged.
    """
    size = len(manifest)
    if not 1 <= n <= size:
        raise InvalidInputError(f"cannot sample {n} images from a dataset of {size}")
    if n == size:
        return Manifest(list(manifest.rows))
    counts = np.array([r.counts for r in manifest.rows], dtype=np.int64)
    parent = counts.sum(axis=0)
    share = parent / parent.sum() if parent.sum() else np.zeros_like(parent, dtype=np.float64)
    rng = SplitMix(derive(seed, 0x5A))

    best_idx, best_dev = None, math.inf
    for _ in range(64):
        idx = rng.permutation(size)[:n]
        dev = _share_deviation(counts[idx].sum(axis=0), share)
        if dev < best_dev:
            best_idx, best_dev = idx, dev
        if dev <= tolerance:
            break
    if best_dev > tolerance:
        chosen = np.zeros(size, dtype=bool)
        chosen[best_idx] = True
        current = counts[chosen].sum(axis=0)
        for _ in range(20 * size):
            i = int(rng.integers(0, n))
            j = int(rng.integers(0, size - n))
            a = np.flatnonzero(chosen)[i]
            b = np.flatnonzero(~chosen)[j]
            trial = current - counts[a] + counts[b]
            dev = _share_deviation(trial, share)
            if dev < best_dev:
                chosen[a], chosen[b] = False, True
                current, best_dev = trial, dev
                if dev <= tolerance:
                    break
        best_idx = np.flatnonzero(chosen)
        if best_dev > tolerance:
            log.warning("sample_subset: best class-share deviation %.4f exceeds tolerance %.4f", best_dev, tolerance)
    return manifest.subset(best_idx)


def split_half(manifest: Manifest, seed: int) -> tuple[Manifest, Manifest]:
    """Disjoint random halves of sizes ``ceil(n/2)`` and ``floor(n/2)``."""
    size = len(manifest)
    if size < 2:
        raise InvalidInputError(f"cannot split a dataset of {size} image(s)")
    perm = SplitMix(derive(seed, 0x5B)).permutation(size)
    k = (size + 1) // 2
    return manifest.subset(perm[:k]), manifest.subset(perm[k:])
