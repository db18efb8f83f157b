"""
Manifest storage and validation.

A manifest is a UTF-8 CSV with a fixed header plus a JSON sidecar holding the
image root and format version. The sidecar sits next to the CSV with the same
stem (``manifest.csv`` / ``manifest.json``).
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import pandas as pd

from data.types import Annotation, DatasetManifest, DiscKey, group_by_key
from utils.exceptions import DataError
from utils.file_manager import load_json, read_image_size, save_json

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = [
    "patient_id",
    "series_id",
    "level",
    "slice_index",
    "x",
    "y",
    "grade",
]
TEXT_COLUMNS = {"patient_id": str, "series_id": str, "level": str, "grade": str}
FORMAT_VERSION = 1


@dataclass
class ValidationReport:
    """Outcome of validate_manifest; empty violations means every invariant holds"""

    violations: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    records_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict:
        return {
            "valid": self.ok,
            "errors": list(self.violations),
            "warnings": list(self.warnings),
            "records_checked": self.records_checked,
        }


def sidecar_path(csv_path: Union[str, Path]) -> Path:
    return Path(csv_path).with_suffix(".json")


def save_manifest(manifest: DatasetManifest, csv_path: Union[str, Path]) -> Path:
    """Write the CSV and its JSON sidecar.

    image_root is stored relative to the sidecar when possible.
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "patient_id": r.key.patient_id,
            "series_id": r.key.series_id,
            "level": r.key.level.value,
            "slice_index": r.slice_index,
            "x": r.x,
            "y": r.y,
            "grade": r.grade.label,
        }
        for r in manifest.records
    ]
    frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    frame.to_csv(
        csv_path,
        index=False,
        encoding="utf-8",
        float_format="%.17g",
        lineterminator="\n",
    )

    sidecar_dir = csv_path.parent.resolve()
    try:
        root = os.path.relpath(manifest.image_root, sidecar_dir)
    except ValueError:
        root = str(manifest.image_root)
    meta = {
        "image_root": Path(root).as_posix(),
        "format_version": manifest.format_version,
    }
    save_json(sidecar_path(csv_path), meta)
    return csv_path


def load_manifest(csv_path: Union[str, Path]) -> DatasetManifest:
    """Read a manifest.

    Missing or unreadable files raise OSError, malformed content raises DataError.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise FileNotFoundError(f"manifest not found: {csv_path}")
    meta_path = sidecar_path(csv_path)
    if not meta_path.is_file():
        raise FileNotFoundError(f"manifest sidecar not found: {meta_path}")

    meta = load_json(meta_path)
    version = int(meta.get("format_version", 0))
    if version != FORMAT_VERSION:
        raise DataError(
            f"unsupported manifest format_version {version} in {meta_path}"
        )
    image_root = Path(meta["image_root"])
    if not image_root.is_absolute():
        image_root = csv_path.parent / image_root

    frame = pd.read_csv(
        csv_path, dtype=TEXT_COLUMNS, keep_default_na=False, encoding="utf-8"
    )
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"manifest {csv_path} lacks columns: {missing}")

    records = []
    for row_number, row in enumerate(frame.itertuples(index=False), start=2):
        try:
            key = DiscKey(
                patient_id=row.patient_id, series_id=row.series_id, level=row.level
            )
            records.append(
                Annotation(
                    key=key,
                    slice_index=int(row.slice_index),
                    x=float(row.x),
                    y=float(row.y),
                    grade=row.grade,
                )
            )
        except (ValueError, DataError) as e:
            raise DataError(f"{csv_path}:{row_number}: {e}") from e
    return DatasetManifest(
        records=tuple(records), image_root=image_root, format_version=version
    )


def validate_manifest(manifest: DatasetManifest) -> ValidationReport:
    """Check every type invariant; report lines name the offending record"""
    report = ValidationReport(records_checked=len(manifest.records))
    sizes: Dict[Path, Tuple[int, int]] = {}

    seen = set()
    for record in manifest.records:
        ident = (record.key, record.slice_index)
        if ident in seen:
            report.violations.append(f"duplicate record {record.describe()}")
            continue
        seen.add(ident)

        key = record.key
        path = manifest.image_path(key.patient_id, key.series_id, record.slice_index)
        if not path.exists():
            report.violations.append(f"missing image for {record.describe()}: {path}")
            continue
        if path not in sizes:
            sizes[path] = read_image_size(path)
        height, width = sizes[path]
        if not 0 <= record.x < width:
            report.violations.append(
                f"x={record.x} outside [0, {width}) for {record.describe()}"
            )
        if not 0 <= record.y < height:
            report.violations.append(
                f"y={record.y} outside [0, {height}) for {record.describe()}"
            )

    for key, records in group_by_key(manifest.records).items():
        grades = {r.grade for r in records}
        if len(grades) > 1:
            names = sorted(g.label for g in grades)
            report.violations.append(f"conflicting grades {names} for disc {key}")
        if len(records) > 1:
            report.warnings.append(
                f"disc {key} has {len(records)} annotated slices; "
                "the median slice is used"
            )

    if report.ok:
        logger.info(f"✅ Manifest valid: {report.records_checked} records")
    else:
        logger.warning(f"⚠️ Manifest has {len(report.violations)} violation(s)")
    return report
