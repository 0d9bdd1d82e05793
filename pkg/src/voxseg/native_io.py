"""Native on-disk format: a JSON manifest next to little-endian raw voxels.

One Volume is a pair {name}.json + {name}.raw. A Case is a directory with
image.json/.raw plus (optionally) label.json/.raw and a case.json carrying
the id. A dataset directory holds one case directory per id and an
index.json listing them. All round-trips are bitwise: the raw file stores
the float32 voxel buffer exactly as held in memory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .volume import Case, Volume

MANIFEST_FORMAT = "voxseg-native-v1"
_MANIFEST_KEYS = {"format", "kind", "dtype", "channels", "extents", "spacing", "data_file", "nbytes"}


def write_native(volume: Volume, json_path) -> None:
    """Write volume as {json_path} + sibling .raw (little-endian float32)."""
    json_path = Path(json_path)
    raw_path = json_path.with_suffix(".raw")
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    manifest = {
        "format": MANIFEST_FORMAT,
        "kind": volume.kind,
        "dtype": "<f4",
        "channels": volume.channels,
        "extents": list(volume.extents),
        "spacing": list(volume.spacing),
        "data_file": raw_path.name,
        "nbytes": len(payload),
    }
    raw_path.write_bytes(payload)
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_native(json_path) -> Volume:
    json_path = Path(json_path)
    try:
        manifest = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{json_path}: unreadable manifest: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{json_path}: not a {MANIFEST_FORMAT} manifest")
    missing = _MANIFEST_KEYS - manifest.keys()
    if missing:
        raise FormatError(f"{json_path}: manifest missing keys {sorted(missing)}")
    unknown = manifest.keys() - _MANIFEST_KEYS
    if unknown:
        raise FormatError(f"{json_path}: unknown manifest keys {sorted(unknown)}")
    if manifest["dtype"] != "<f4":
        raise FormatError(f"{json_path}: unsupported dtype {manifest['dtype']!r}")

    shape = (manifest["channels"], *manifest["extents"])
    expected = int(np.prod(shape)) * 4
    if manifest["nbytes"] != expected:
        raise FormatError(
            f"{json_path}: manifest declares {manifest['nbytes']} bytes "
            f"but shape {shape} needs {expected}"
        )
    raw_path = json_path.parent / manifest["data_file"]
    raw = raw_path.read_bytes() if raw_path.exists() else None
    if raw is None:
        raise FormatError(f"{json_path}: data file {raw_path.name!r} not found")
    if len(raw) != expected:
        raise FormatError(f"{raw_path}: has {len(raw)} bytes, manifest declares {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return Volume(data.copy(), spacing=tuple(manifest["spacing"]), kind=manifest["kind"])


def write_case(case: Case, case_dir) -> None:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    write_native(case.image, case_dir / "image.json")
    meta = {"id": case.id, "has_label": case.label is not None}
    if case.label is not None:
        write_native(case.label, case_dir / "label.json")
    (case_dir / "case.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_case(case_dir) -> Case:
    case_dir = Path(case_dir)
    meta_path = case_dir / "case.json"
    if not meta_path.exists():
        raise FormatError(f"{case_dir}: no case.json — not a native case directory")
    meta = json.loads(meta_path.read_text())
    image = read_native(case_dir / "image.json")
    label = read_native(case_dir / "label.json") if meta.get("has_label") else None
    return Case(id=str(meta["id"]), image=image, label=label)


def write_index(dataset_dir, ids: list[str]) -> None:
    dataset_dir = Path(dataset_dir)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    (dataset_dir / "index.json").write_text(
        json.dumps({"format": MANIFEST_FORMAT, "cases": list(ids)}, indent=2, sort_keys=True) + "\n"
    )


def read_index(dataset_dir) -> list[str]:
    index_path = Path(dataset_dir) / "index.json"
    if not index_path.exists():
        raise DataError(f"{dataset_dir}: no index.json — not a native dataset directory")
    index = json.loads(index_path.read_text())
    ids = index.get("cases")
    if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
        raise FormatError(f"{index_path}: malformed case list")
    return ids
