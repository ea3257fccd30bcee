"""
Dataset ingestion, the seeded per-class 80-20 split and the manifest file.

The dataset root holds one subdirectory per age range ("0-2" ... "60+").
The manifest is UTF-8 text, one sample per line: `path<TAB>label<TAB>split`.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .exceptions import DataError, EmptyDatasetError, MissingArtifactError
from .imaging import is_readable_image, list_images
from .network import AGE_LABELS, AgeClass

logger = logging.getLogger(__name__)

TRAIN = "train"
VAL = "val"
SPLITS = (TRAIN, VAL)


@dataclass(frozen=True)
class Sample:
    path: str
    label: AgeClass
    split: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "label", AgeClass(self.label))
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"Unknown split {self.split!r} for {self.path}")


@dataclass
class DatasetManifest:
    samples: List[Sample] = field(default_factory=list)
    seed: Optional[int] = None

    def __len__(self):
        return len(self.samples)

    def subset(self, split: str) -> List[Sample]:
        return [s for s in self.samples if s.split == split]

    def counts(self) -> Dict[AgeClass, Dict[str, int]]:
        """Per class: total, train and val counts (zero rows for absent classes)."""
        tally = Counter((s.label, s.split) for s in self.samples)
        table = {}
        for cls in AgeClass:
            train, val = tally[(cls, TRAIN)], tally[(cls, VAL)]
            total = sum(n for (label, _), n in tally.items() if label == cls)
            table[cls] = {"total": total, TRAIN: train, VAL: val}
        return table

    def labels_by_path(self) -> Dict[str, AgeClass]:
        return {s.path: s.label for s in self.samples}


def ingest(root_dir) -> DatasetManifest:
    """
    Every readable image below a known class directory becomes a Sample.

    Unknown directories and unreadable files are logged and skipped.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise MissingArtifactError(f"Dataset root {root} does not exist")

    samples, unreadable = [], []
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            continue
        if entry.name not in AGE_LABELS:
            logger.warning(f"Skipping unknown class directory {entry.name!r}")
            continue
        label = AgeClass.from_label(entry.name)
        for path in list_images(entry):
            if is_readable_image(path):
                samples.append(Sample(str(path), label))
            else:
                unreadable.append(path)

    if unreadable:
        logger.warning(f"Skipped {len(unreadable)} unreadable images: {', '.join(map(str, unreadable))}")
    if not samples:
        raise EmptyDatasetError(f"No readable images found under {root}")
    logger.info(f"Ingested {len(samples)} samples from {root}")
    return DatasetManifest(samples)


def train_count(n: int, ratio: float) -> int:
    # ceiling rule; the epsilon keeps exact products like 0.8 * 10 from rounding up
    return min(n, math.ceil(ratio * n - 1e-9))


def split(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """
    Per class: sort by path, shuffle with a generator seeded by (seed, class),
    first ceil(ratio * n) samples to train, the rest to val.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    by_class: Dict[AgeClass, List[Sample]] = {}
    for sample in manifest.samples:
        by_class.setdefault(sample.label, []).append(sample)

    assigned = []
    for cls in sorted(by_class):
        members = sorted(by_class[cls], key=lambda s: s.path)
        if len(members) < 2:
            logger.warning(f"Class {cls.label} has {len(members)} sample(s); assigning all to train")
            assigned += [replace(s, split=TRAIN) for s in members]
            continue
        rng = np.random.default_rng([seed, int(cls)])
        order = rng.permutation(len(members))
        n_train = train_count(len(members), ratio)
        for rank, i in enumerate(order):
            assigned.append(replace(members[i], split=TRAIN if rank < n_train else VAL))

    assigned.sort(key=lambda s: s.path)
    result = DatasetManifest(assigned, seed)
    for cls, row in result.counts().items():
        if row["total"]:
            logger.info(f"Class {cls.label}: {row[TRAIN]} train / {row[VAL]} val")
    return result


def dumps_manifest(manifest: DatasetManifest) -> str:
    lines = []
    for sample in manifest.samples:
        if sample.split is None:
            raise DataError(f"Sample {sample.path} has no split assignment")
        lines.append(f"{sample.path}\t{sample.label.label}\t{sample.split}\n")
    return "".join(lines)


def loads_manifest(text: str, source: str = "<manifest>") -> DatasetManifest:
    samples = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{source}:{number}: expected path<TAB>label<TAB>split")
        path, label, which = parts
        try:
            samples.append(Sample(path, AgeClass.from_label(label), which))
        except ValueError as e:
            raise DataError(f"{source}:{number}: {e}") from e
    return DatasetManifest(samples)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Manifest {path} does not exist; run `prepare` first")
    return loads_manifest(path.read_text(encoding="utf-8"), str(path))
