"""Single-container binary format for parameters, scenes, detections and reports.

Layout (all integers little-endian)::

    magic  b"L2GF"          4 bytes
    version                 u32
    section count           u32
    per section: name length u16, name utf-8, offset u64, length u64
    payloads

Array payloads carry their own header (dtype string, rank, shape) followed by
the raw little-endian IEEE-754 / integer bytes, so round trips are bit exact.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Box7, CameraModel
from .kernels import FeatureMap, ParamStore
from .metrics import Detection
from .voxel import PointCloud

__all__ = [
    "ArtifactError",
    "BadMagicError",
    "FORMAT_VERSION",
    "MAGIC",
    "TruncatedFileError",
    "VersionMismatchError",
    "WrongKindError",
    "load_detections",
    "load_params",
    "load_reports",
    "load_scene",
    "read_container",
    "save_detections",
    "save_params",
    "save_reports",
    "save_scene",
    "write_container",
    "write_detections_text",
]

MAGIC = b"L2GF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_ENTRY = struct.Struct("<QQ")


class ArtifactError(Exception):
    pass


class BadMagicError(ArtifactError):
    pass


class TruncatedFileError(ArtifactError):
    pass


class VersionMismatchError(ArtifactError):
    pass


class WrongKindError(ArtifactError):
    pass


# ---------------------------------------------------------------------------
# Container


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    dt = le.dtype.str.encode("ascii")
    head = struct.pack("<B", len(dt)) + dt + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(le).tobytes()


def decode_array(buf: bytes) -> np.ndarray:
    try:
        n = buf[0]
        dt = np.dtype(buf[1:1 + n].decode("ascii"))
        pos = 1 + n
        ndim = buf[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
    except (IndexError, struct.error) as exc:
        raise TruncatedFileError("truncated array header") from exc
    count = int(np.prod(shape)) if shape else 1
    need = count * dt.itemsize
    if len(buf) - pos < need:
        raise TruncatedFileError("truncated array payload")
    return np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()


def write_container(path: str | os.PathLike, sections: dict[str, bytes]) -> None:
    names = list(sections)
    table_size = sum(2 + len(n.encode("utf-8")) + _ENTRY.size for n in names)
    offset = _HEADER.size + table_size
    table = b""
    for name in names:
        raw = name.encode("utf-8")
        table += struct.pack("<H", len(raw)) + raw + _ENTRY.pack(offset, len(sections[name]))
        offset += len(sections[name])
    data = _HEADER.pack(MAGIC, FORMAT_VERSION, len(names)) + table + b"".join(sections[n] for n in names)
    Path(path).write_bytes(data)


def read_container(path: str | os.PathLike) -> dict[str, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: file too short for a header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file too short for a header")
    _, version, count = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = _HEADER.size
    sections: dict[str, bytes] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + n > len(data):
                raise TruncatedFileError(f"{path}: truncated section table")
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            off, length = _ENTRY.unpack_from(data, pos)
            pos += _ENTRY.size
            if off + length > len(data):
                raise TruncatedFileError(f"{path}: section {name!r} runs past end of file")
            if name in sections:
                raise ArtifactError(f"{path}: duplicate section {name!r}")
            sections[name] = data[off:off + length]
    except struct.error as exc:
        raise TruncatedFileError(f"{path}: truncated section table") from exc
    return sections


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def _read_kind(path, sections: dict[str, bytes], kind: str) -> dict:
    if "meta" not in sections:
        raise ArtifactError(f"{path}: missing meta section")
    meta = json.loads(sections["meta"].decode("utf-8"))
    if meta.get("kind") != kind:
        raise WrongKindError(f"{path}: holds {meta.get('kind')!r}, expected {kind!r}")
    return meta


def _warn_unknown(path, sections: dict[str, bytes], known: Iterable[str]) -> None:
    extra = sorted(set(sections) - set(known))
    if extra:
        warnings.warn(f"{path}: ignoring unknown sections {extra}", stacklevel=3)


# ---------------------------------------------------------------------------
# Parameters


def save_params(path, params: ParamStore) -> None:
    sections = {"meta": _json({"kind": "params", "seed": params.seed, "names": params.names()})}
    for name, arr in params.items():
        sections[f"t/{name}"] = encode_array(arr)
    write_container(path, sections)


def load_params(path) -> ParamStore:
    sections = read_container(path)
    meta = _read_kind(path, sections, "params")
    known = ["meta"] + [f"t/{n}" for n in meta["names"]]
    missing = [k for k in known if k not in sections]
    if missing:
        raise TruncatedFileError(f"{path}: missing sections {missing}")
    _warn_unknown(path, sections, known)
    return ParamStore({n: decode_array(sections[f"t/{n}"]) for n in meta["names"]}, seed=meta["seed"])


# ---------------------------------------------------------------------------
# Scenes


def save_scene(path, scene) -> None:
    meta = {
        "kind": "scene",
        "seed": scene.seed,
        "meta": scene.meta,
        "n_cameras": len(scene.cameras),
        "strides": [fm.stride for fm in scene.feature_maps],
        "image_sizes": [[c.image_width, c.image_height] for c in scene.cameras],
    }
    boxes = np.array([b.as_array() for b in scene.gt_boxes]).reshape(-1, 7)
    sections = {
        "meta": _json(meta),
        "points/xyz": encode_array(scene.points.xyz),
        "points/extras": encode_array(scene.points.extras),
        "gt/boxes": encode_array(boxes),
        "gt/classes": encode_array(np.asarray(scene.gt_classes, dtype=np.int64)),
    }
    for i, (cam, fm) in enumerate(zip(scene.cameras, scene.feature_maps)):
        sections[f"cam/{i}/intrinsic"] = encode_array(cam.intrinsic)
        sections[f"cam/{i}/extrinsic"] = encode_array(cam.extrinsic)
        sections[f"fm/{i}"] = encode_array(fm.data)
    write_container(path, sections)


def load_scene(path):
    from .synth import Scene

    sections = read_container(path)
    meta = _read_kind(path, sections, "scene")
    n_cam = meta["n_cameras"]
    known = ["meta", "points/xyz", "points/extras", "gt/boxes", "gt/classes"]
    for i in range(n_cam):
        known += [f"cam/{i}/intrinsic", f"cam/{i}/extrinsic", f"fm/{i}"]
    missing = [k for k in known if k not in sections]
    if missing:
        raise TruncatedFileError(f"{path}: missing sections {missing}")
    _warn_unknown(path, sections, known)
    cams, fms = [], []
    for i in range(n_cam):
        w, h = meta["image_sizes"][i]
        cams.append(CameraModel(decode_array(sections[f"cam/{i}/intrinsic"]),
                                decode_array(sections[f"cam/{i}/extrinsic"]), w, h))
        fms.append(FeatureMap(decode_array(sections[f"fm/{i}"]), stride=meta["strides"][i]))
    boxes = decode_array(sections["gt/boxes"])
    return Scene(
        points=PointCloud(decode_array(sections["points/xyz"]), decode_array(sections["points/extras"])),
        gt_boxes=[Box7.from_array(b) for b in boxes],
        gt_classes=[int(c) for c in decode_array(sections["gt/classes"])],
        cameras=cams,
        feature_maps=fms,
        seed=meta["seed"],
        meta=meta["meta"],
    )


# ---------------------------------------------------------------------------
# Detections


def _canonical_order(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (d.frame, -d.confidence))


def save_detections(path, detections: Iterable[Detection]) -> None:
    dets = _canonical_order(list(detections))
    sections = {
        "meta": _json({"kind": "detections", "count": len(dets)}),
        "frames": encode_array(np.array([d.frame for d in dets], dtype=np.int64)),
        "labels": encode_array(np.array([d.label for d in dets], dtype=np.int64)),
        "boxes": encode_array(np.array([d.box.as_array() for d in dets]).reshape(-1, 7)),
        "confidence": encode_array(np.array([d.confidence for d in dets], dtype=np.float64)),
    }
    write_container(path, sections)


def load_detections(path) -> list[Detection]:
    sections = read_container(path)
    _read_kind(path, sections, "detections")
    known = ["meta", "frames", "labels", "boxes", "confidence"]
    missing = [k for k in known if k not in sections]
    if missing:
        raise TruncatedFileError(f"{path}: missing sections {missing}")
    _warn_unknown(path, sections, known)
    frames = decode_array(sections["frames"])
    labels = decode_array(sections["labels"])
    boxes = decode_array(sections["boxes"])
    conf = decode_array(sections["confidence"])
    return [Detection(Box7.from_array(b), float(c), int(l), int(f))
            for f, l, b, c in zip(frames, labels, boxes, conf)]


def write_detections_text(path, detections: Iterable[Detection]) -> None:
    """One line per detection: frame, class, cx cy cz l w h heading, confidence."""
    lines = []
    for d in _canonical_order(list(detections)):
        nums = " ".join(f"{v:.17g}" for v in d.box.as_array())
        lines.append(f"{d.frame} {d.label} {nums} {d.confidence:.17g}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_detections_text(path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        vals = [float(v) for v in parts[2:]]
        out.append(Detection(Box7.from_array(vals[:7]), vals[7], int(parts[1]), int(parts[0])))
    return out


# ---------------------------------------------------------------------------
# Gradient reports


def save_reports(path, reports) -> None:
    meta = {"kind": "gradreports", "ops": [r.op for r in reports], "passed": [r.passed for r in reports]}
    nums = np.array([[r.max_rel_err, r.max_abs_err, r.tolerance, r.probes] for r in reports],
                    dtype=np.float64).reshape(-1, 4)
    write_container(path, {"meta": _json(meta), "values": encode_array(nums)})


def load_reports(path):
    from .gradcheck import GradReport

    sections = read_container(path)
    meta = _read_kind(path, sections, "gradreports")
    _warn_unknown(path, sections, ["meta", "values"])
    nums = decode_array(sections["values"])
    return [
        GradReport(op=op, max_rel_err=float(v[0]), max_abs_err=float(v[1]), tolerance=float(v[2]),
                   probes=int(v[3]), passed=bool(p))
        for op, p, v in zip(meta["ops"], meta["passed"], nums)
    ]
