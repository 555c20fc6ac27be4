"""On-disk formats: point-cloud text files, key/value manifests, instance bundles and reports.

Layout of a bundle directory::

    bundle.json                      resolved config + instance index
    profiles/<category>/profile.txt  symmetry and mean size
    profiles/<category>/prior.xyz
    instances/<instance_id>/manifest.txt
    instances/<instance_id>/observed.xyz
    instances/<instance_id>/coords.xyz
    instances/<instance_id>/labels.txt

Floats are written with the shortest repr that round-trips, so reading a bundle back gives
bit-identical arrays.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np
import pandas as pd
import structlog

from .core.error_handling import BundleFormatError, BundleIOError
from .geometry import Pose9
from .objective import InlierMask
from .symmetry import CategoryProfile, SymmetryClass, SymmetryKind
from .synthgen import Instance

logger = structlog.get_logger()

BUNDLE_INDEX = "bundle.json"


@dataclass
class Bundle:
    config: Dict[str, Any]
    profiles: Dict[str, CategoryProfile] = field(default_factory=dict)
    instances: List[Instance] = field(default_factory=list)


def format_float(value: float) -> str:
    return np.format_float_positional(float(value), unique=True, trim="-")


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise BundleIOError(f"File not found: {path}", details={"path": str(path)})
    except OSError as e:
        raise BundleIOError(f"Cannot read {path}: {e}", details={"path": str(path)})


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise BundleIOError(f"Cannot write {path}: {e}", details={"path": str(path)})


def _data_lines(text: str) -> Iterable[str]:
    for line in text.splitlines():
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield stripped


def write_cloud(path: Path, cloud: np.ndarray, comment: str = "") -> None:
    lines = [f"# {comment}"] if comment else []
    lines.extend(" ".join(format_float(v) for v in point) for point in np.asarray(cloud, dtype=float).reshape(-1, 3))
    _write_text(path, "\n".join(lines) + "\n")


def read_cloud(path: Path) -> np.ndarray:
    rows = []
    for number, line in enumerate(_data_lines(_read_text(path)), start=1):
        fields = line.split(" ")
        if len(fields) != 3:
            raise BundleFormatError(f"{path}: expected 3 fields per point", details={"path": str(path), "point": number})
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise BundleFormatError(f"{path}: malformed number", details={"path": str(path), "point": number})
    return np.asarray(rows, dtype=float).reshape(-1, 3)


def write_labels(path: Path, mask: InlierMask) -> None:
    _write_text(path, "".join("1\n" if label else "0\n" for label in mask.labels))


def read_labels(path: Path) -> InlierMask:
    values = list(_data_lines(_read_text(path)))
    if any(v not in ("0", "1") for v in values):
        raise BundleFormatError(f"{path}: labels must be 0 or 1", details={"path": str(path)})
    return InlierMask.from_labels(np.array([v == "1" for v in values], dtype=bool))


def write_manifest(path: Path, entries: Dict[str, Any]) -> None:
    lines = []
    for key, value in entries.items():
        if isinstance(value, (list, tuple, np.ndarray)):
            value = " ".join(format_float(v) for v in np.asarray(value, dtype=float).reshape(-1))
        lines.append(f"{key} = {value}")
    _write_text(path, "\n".join(lines) + "\n")


def read_manifest(path: Path) -> Dict[str, str]:
    entries = {}
    for line in _data_lines(_read_text(path)):
        key, sep, value = line.partition("=")
        if not sep:
            raise BundleFormatError(f"{path}: expected 'key = value'", details={"path": str(path), "line": line})
        entries[key.strip()] = value.strip()
    return entries


def _floats(entries: Dict[str, str], key: str, count: int, path: Path) -> np.ndarray:
    try:
        values = np.array([float(v) for v in entries[key].split()], dtype=float)
    except KeyError:
        raise BundleFormatError(f"{path}: missing key {key}", details={"path": str(path), "key": key})
    except ValueError:
        raise BundleFormatError(f"{path}: malformed value for {key}", details={"path": str(path), "key": key})
    if len(values) != count:
        raise BundleFormatError(f"{path}: {key} needs {count} values", details={"path": str(path), "key": key})
    return values


def write_profile(directory: Path, profile: CategoryProfile) -> None:
    write_manifest(
        directory / "profile.txt",
        {
            "name": profile.name,
            "symmetry": profile.symmetry.kind.value,
            "candidate_count": profile.symmetry.candidate_count,
            "mean_size": profile.mean_size,
        },
    )
    write_cloud(directory / "prior.xyz", profile.prior, comment=f"{profile.name} prior (NOCS)")


def read_profile(directory: Path) -> CategoryProfile:
    path = directory / "profile.txt"
    entries = read_manifest(path)
    try:
        symmetry = SymmetryClass(SymmetryKind(entries["symmetry"]), int(entries["candidate_count"]))
        name = entries["name"]
    except (KeyError, ValueError) as e:
        raise BundleFormatError(f"{path}: invalid profile ({e})", details={"path": str(path)})
    return CategoryProfile(name, symmetry, _floats(entries, "mean_size", 3, path), read_cloud(directory / "prior.xyz"))


def write_instance(directory: Path, instance: Instance) -> None:
    pose = instance.pose_gt
    write_manifest(
        directory / "manifest.txt",
        {
            "instance_id": instance.instance_id,
            "category": instance.category,
            "seed": instance.seed,
            "rotation": pose.rotation,
            "translation": pose.translation,
            "size": pose.size,
        },
    )
    write_cloud(directory / "observed.xyz", instance.observed)
    write_cloud(directory / "coords.xyz", instance.coords_gt)
    write_labels(directory / "labels.txt", instance.inliers_gt)


def read_instance(directory: Path) -> Instance:
    path = directory / "manifest.txt"
    entries = read_manifest(path)
    pose = Pose9(_floats(entries, "rotation", 9, path).reshape(3, 3), _floats(entries, "translation", 3, path), _floats(entries, "size", 3, path))
    observed = read_cloud(directory / "observed.xyz")
    coords = read_cloud(directory / "coords.xyz")
    labels = read_labels(directory / "labels.txt")
    if not (len(observed) == len(coords) == len(labels)):
        raise BundleFormatError(f"{directory}: observed, coords and labels differ in length", details={"path": str(directory)})
    try:
        return Instance(entries["instance_id"], entries["category"], observed, coords, pose, labels, int(entries["seed"]))
    except (KeyError, ValueError) as e:
        raise BundleFormatError(f"{path}: invalid manifest ({e})", details={"path": str(path)})


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    _write_text(path, json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise BundleFormatError(f"{path}: invalid JSON ({e.msg})", details={"path": str(path)})


def write_bundle(root: Path, config: Dict[str, Any], profiles: Dict[str, CategoryProfile], instances: Sequence[Instance]) -> None:
    root = Path(root)
    for name in sorted(profiles):
        write_profile(root / "profiles" / name, profiles[name])
    for instance in instances:
        write_instance(root / "instances" / instance.instance_id, instance)
    index = [{"instance_id": i.instance_id, "category": i.category, "seed": i.seed} for i in instances]
    write_json(root / BUNDLE_INDEX, {"config": config, "instances": index})
    logger.info("Bundle written", path=str(root), instances=len(instances), categories=sorted(profiles))


def read_bundle(root: Path) -> Bundle:
    root = Path(root)
    if not root.is_dir():
        raise BundleIOError(f"Bundle directory not found: {root}", details={"path": str(root)})
    index = read_json(root / BUNDLE_INDEX)
    try:
        entries = index["instances"]
        config = index["config"]
    except (KeyError, TypeError):
        raise BundleFormatError(f"{root / BUNDLE_INDEX}: missing config or instances", details={"path": str(root)})

    bundle = Bundle(config=config)
    for entry in entries:
        category = entry["category"]
        if category not in bundle.profiles:
            bundle.profiles[category] = read_profile(root / "profiles" / category)
        bundle.instances.append(read_instance(root / "instances" / entry["instance_id"]))
    return bundle


def write_report(directory: Path, stem: str, payload: Dict[str, Any], rows: List[Dict[str, Any]]) -> None:
    """`<stem>.json` with the full payload and `<stem>.csv` mirroring its per-instance rows."""
    directory = Path(directory)
    write_json(directory / f"{stem}.json", payload)
    try:
        pd.DataFrame(rows).to_csv(directory / f"{stem}.csv", index=False)
    except OSError as e:
        raise BundleIOError(f"Cannot write {directory / stem}.csv: {e}", details={"path": str(directory)})
