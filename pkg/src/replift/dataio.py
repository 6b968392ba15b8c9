"""Line-oriented dataset files and the dataset manifest.

Each file starts with a header::

    #replift v1 joints=17 kind=2d normalized=0

followed by one comma-separated record per line. ``3d`` records hold the
``3 x n`` pose row-major (all x, then y, then z), ``2d`` records the ``2 x n``
pose row-major plus a trailing integer visibility bitmask (bit j set = joint
j visible), ``cam`` records the row-major ``2 x 3`` camera. Floats are
written with ``repr`` so a save/load round trip is bit-exact.

A dataset directory holds one file per kind and a ``manifest.json`` naming
the member files and the pairing flag.
"""

import hashlib
import json
import math
import re
from pathlib import Path

import numpy as np

from .datagen import PoseDataset
from .skeleton import DEFAULT_SKELETON, SkeletonSpec

MANIFEST = "manifest.json"
FORMAT = "replift-dataset v1"
_HEADER = re.compile(r"^#replift v1 joints=(\d+) kind=(2d|3d|cam) normalized=([01])\s*$")
_ROWS = {"2d": 2, "3d": 3}


class DatasetFormatError(ValueError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x):
    return repr(float(x))


def write_records(path, kind, array, masks=None, normalized=False):
    """Write ``array`` ((N, 2|3, n) poses or (N, 2, 3) cameras) to ``path``."""
    array = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    if kind == "cam":
        flat = array.reshape(len(array), 6)
        joints = 0
    else:
        joints = array.shape[2]
        flat = array.reshape(len(array), array.shape[1] * joints)
    lines = [f"#replift v1 joints={joints} kind={kind} normalized={int(bool(normalized))}"]
    if kind == "2d":
        if masks is None:
            masks = np.ones((len(array), joints), dtype=bool)
        for row, m in zip(flat, np.asarray(masks, dtype=bool)):
            bits = sum(1 << j for j in np.flatnonzero(m).tolist())
            lines.append(",".join(map(_fmt, row)) + f",{bits}")
    else:
        for row in flat:
            lines.append(",".join(map(_fmt, row)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_records(path, kind=None):
    """Parse a record file. Returns ``(kind, array, masks_or_None, normalized)``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except UnicodeDecodeError:
        raise DatasetFormatError(f"{path}: not an ASCII record file") from None
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: missing header")
    m = _HEADER.match(lines[0])
    if not m:
        raise DatasetFormatError(f"{path}:1: malformed header {lines[0]!r}")
    joints, file_kind, normalized = int(m.group(1)), m.group(2), m.group(3) == "1"
    if kind is not None and file_kind != kind:
        raise DatasetFormatError(f"{path}:1: expected kind={kind}, found kind={file_kind}")
    if file_kind == "cam":
        width = 6
    else:
        width = _ROWS[file_kind] * joints + (1 if file_kind == "2d" else 0)
    rows = []
    masks = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise DatasetFormatError(
                f"{path}:{lineno}: record has {len(fields)} fields, expected {width}"
            )
        values = fields[:-1] if file_kind == "2d" else fields
        try:
            row = [float(v) for v in values]
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric field") from None
        if not all(math.isfinite(v) for v in row):
            raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
        if file_kind == "2d":
            try:
                bits = int(fields[-1])
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: visibility bitmask is not an integer") from None
            if bits < 0 or bits >= (1 << joints):
                raise DatasetFormatError(f"{path}:{lineno}: visibility bitmask out of range")
            masks.append([(bits >> j) & 1 == 1 for j in range(joints)])
    if file_kind == "cam":
        array = np.asarray(rows, dtype=np.float64).reshape(-1, 2, 3)
    else:
        array = np.asarray(rows, dtype=np.float64).reshape(-1, _ROWS[file_kind], joints)
    mask_arr = np.asarray(masks, dtype=bool).reshape(-1, joints) if file_kind == "2d" else None
    return file_kind, array, mask_arr, normalized


def load_keypoints(path, spec=DEFAULT_SKELETON):
    """2D keypoint file -> ``(poses2d, masks)`` with the never-detected joints masked."""
    _, W, masks, _ = read_records(path, "2d")
    if W.shape[2] != spec.n_joints:
        raise DatasetFormatError(f"{path}: {W.shape[2]} joints, skeleton expects {spec.n_joints}")
    masks = masks.copy()
    masks[:, list(spec.always_masked())] = False
    return W, masks


def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"poses2d": "poses2d.csv"}
    write_records(directory / files["poses2d"], "2d", dataset.poses2d, dataset.masks, dataset.normalized)
    if dataset.poses3d is not None:
        files["poses3d"] = "poses3d.csv"
        write_records(directory / files["poses3d"], "3d", dataset.poses3d, normalized=dataset.aligned)
    if dataset.cameras is not None:
        files["cameras"] = "cameras.csv"
        write_records(directory / files["cameras"], "cam", dataset.cameras)
    if dataset.template is not None:
        files["template"] = "template.csv"
        write_records(directory / files["template"], "3d", dataset.template[None])
    manifest = {
        "format": FORMAT,
        "pairing": "paired" if dataset.paired else "unpaired",
        "files": files,
        "skeleton": dataset.skeleton.to_dict(),
        "actions": list(dataset.actions) if dataset.actions is not None else None,
        "units": {"2d": "px" if not dataset.normalized else "normalized", "3d": "mm"},
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return directory / MANIFEST


def load_dataset(path, spec=None):
    """Load a dataset directory (or its manifest path)."""
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{manifest_path}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise DatasetFormatError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    base = manifest_path.parent
    if spec is None:
        spec = SkeletonSpec.from_dict(manifest["skeleton"]) if "skeleton" in manifest else DEFAULT_SKELETON
    files = manifest["files"]
    _, W, masks, normalized = read_records(base / files["poses2d"], "2d")
    n = spec.n_joints
    if W.shape[2] != n:
        raise DatasetFormatError(f"{base / files['poses2d']}: {W.shape[2]} joints, skeleton has {n}")
    masks[:, list(spec.always_masked())] = False
    kw = {}
    aligned = False
    if "poses3d" in files:
        _, X, _, aligned = read_records(base / files["poses3d"], "3d")
        if X.shape[2] != n:
            raise DatasetFormatError(f"{base / files['poses3d']}: {X.shape[2]} joints, skeleton has {n}")
        kw["poses3d"] = X
    if "cameras" in files:
        _, K, _, _ = read_records(base / files["cameras"], "cam")
        kw["cameras"] = K
    if "template" in files:
        _, T, _, _ = read_records(base / files["template"], "3d")
        kw["template"] = T[0]
    try:
        return PoseDataset(
            poses2d=W,
            masks=masks,
            paired=manifest.get("pairing") == "paired",
            actions=manifest.get("actions"),
            skeleton=spec,
            normalized=normalized,
            aligned=aligned,
            **kw,
        )
    except ValueError as exc:
        raise DatasetFormatError(f"{manifest_path}: inconsistent dataset: {exc}") from None
