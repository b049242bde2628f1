import os
from typing import List, NamedTuple

from src.errors import DataFormatError
from src.phantom import SPLITS


class ManifestRow(NamedTuple):
    patient_id: str
    eye_id: str
    split: str
    path: str


def write_manifest(path: str, rows: List[ManifestRow]):
    """One record per line: patient_id<TAB>eye_id<TAB>split<TAB>path."""
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write("\t".join(row) + "\n")


def read_manifest(path: str) -> List[ManifestRow]:
    if not os.path.exists(path):
        raise DataFormatError(f"Manifest not found: {path}")

    rows = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
            row = ManifestRow(*fields)
            if row.split not in SPLITS:
                raise DataFormatError(f"{path}:{lineno}: unknown split {row.split!r}")
            if row.eye_id in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate eye_id {row.eye_id!r}")
            seen.add(row.eye_id)
            rows.append(row)
    return rows


def rows_for_split(rows: List[ManifestRow], split: str) -> List[ManifestRow]:
    return [r for r in rows if r.split == split]


def resolve_path(dataset_dir: str, row: ManifestRow) -> str:
    return row.path if os.path.isabs(row.path) else os.path.join(dataset_dir, row.path)
