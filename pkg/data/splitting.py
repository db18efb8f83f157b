"""
Leakage-safe, grade-stratified train/val/test partitions at disc granularity.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from data.types import (
    PARTITIONS,
    DatasetManifest,
    DiscKey,
    Partition,
    SeverityGrade,
    SplitAssignment,
)
from utils.exceptions import ConfigError, DataError, InconsistencyError
from utils.file_manager import load_json, save_json

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)
SPLIT_COLUMNS = ["patient_id", "series_id", "level", "partition"]


def largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    """Apportion total by fractions.

    Leftover units go to the largest remainders, ties in partition order.
    """
    quotas = [f * total for f in fractions]
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(
        range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i)
    )
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def _check_fractions(fractions: Sequence[float]) -> Tuple[float, float, float]:
    if len(fractions) != 3:
        raise ConfigError(
            f"expected three fractions (train, val, test), got {fractions}"
        )
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(
            f"fractions must be non-negative and sum to 1, got {tuple(fractions)}"
        )
    return tuple(float(f) for f in fractions)


def stratified_disc_split(
    manifest: DatasetManifest,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> SplitAssignment:
    """Shuffle discs within each grade and apportion them by largest remainder"""
    fractions = _check_fractions(fractions)
    rng = np.random.default_rng(seed)
    grades = manifest.grades()
    keys = manifest.disc_keys()
    active = sum(1 for f in fractions if f > 0)

    entries: List[Tuple[DiscKey, Partition]] = []
    warnings: List[str] = []
    for grade in SeverityGrade:
        members = [k for k in keys if grades[k] == grade]
        if not members:
            continue
        shuffled = [members[i] for i in rng.permutation(len(members))]
        if len(members) < active:
            message = (
                f"grade {grade.label} has {len(members)} disc(s) for {active} "
                "partitions; all assigned to train"
            )
            logger.warning(f"⚠️ {message}")
            warnings.append(message)
            entries.extend((k, Partition.TRAIN) for k in shuffled)
            continue
        counts = largest_remainder(len(members), fractions)
        start = 0
        for partition, count in zip(PARTITIONS, counts):
            entries.extend((k, partition) for k in shuffled[start : start + count])
            start += count

    entries.sort(key=lambda e: e[0].sort_key)
    split = SplitAssignment(
        entries=tuple(entries),
        seed=seed,
        fractions=fractions,
        warnings=tuple(warnings),
    )
    counts = split.counts()
    logger.info(
        f"✂️ Split {len(entries)} discs: train={counts[Partition.TRAIN]} "
        f"val={counts[Partition.VAL]} test={counts[Partition.TEST]}"
    )
    return split


@dataclass
class AuditReport:
    violations: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    histograms: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.missing

    def to_dict(self) -> Dict:
        return {
            "violations": self.violations,
            "missing": self.missing,
            "histograms": self.histograms,
        }


def audit_leakage(split: SplitAssignment, manifest: DatasetManifest) -> AuditReport:
    """Count discs placed in more than one partition; histogram grades per partition"""
    grades = manifest.grades()
    report = AuditReport(histograms={p.value: [0, 0, 0] for p in PARTITIONS})

    memberships: Dict[DiscKey, List[Partition]] = {}
    for key, partition in split.entries:
        if key not in grades:
            raise InconsistencyError(
                f"split names disc {key} which the manifest does not contain"
            )
        memberships.setdefault(key, []).append(Partition(partition))

    for key in sorted(memberships, key=lambda k: k.sort_key):
        parts = sorted({p.value for p in memberships[key]})
        if len(parts) > 1:
            report.violations.append(f"disc {key} appears in {', '.join(parts)}")
        for part in parts:
            report.histograms[part][int(grades[key])] += 1

    report.missing = [str(k) for k in manifest.disc_keys() if k not in memberships]

    if report.ok:
        logger.info("✅ Leakage audit passed")
    else:
        logger.warning(
            f"⚠️ Leakage audit: {len(report.violations)} violation(s), "
            f"{len(report.missing)} unassigned disc(s)"
        )
    return report


def save_split(split: SplitAssignment, csv_path: Union[str, Path]) -> Path:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "patient_id": k.patient_id,
            "series_id": k.series_id,
            "level": k.level.value,
            "partition": Partition(p).value,
        }
        for k, p in split.entries
    ]
    frame = pd.DataFrame(rows, columns=SPLIT_COLUMNS)
    frame.to_csv(csv_path, index=False, lineterminator="\n")
    meta = {
        "seed": split.seed,
        "fractions": list(split.fractions),
        "warnings": list(split.warnings),
    }
    save_json(csv_path.with_suffix(".json"), meta)
    return csv_path


def load_split(csv_path: Union[str, Path]) -> SplitAssignment:
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise FileNotFoundError(f"split not found: {csv_path}")
    meta = load_json(csv_path.with_suffix(".json"))
    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    try:
        entries = tuple(
            (
                DiscKey(patient_id=r.patient_id, series_id=r.series_id, level=r.level),
                Partition(r.partition),
            )
            for r in frame.itertuples(index=False)
        )
    except ValueError as e:
        raise DataError(f"malformed split file {csv_path}: {e}") from e
    return SplitAssignment(
        entries=entries,
        seed=int(meta["seed"]),
        fractions=tuple(meta["fractions"]),
        warnings=tuple(meta.get("warnings", ())),
    )
