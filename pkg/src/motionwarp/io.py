"""On-disk formats: array containers, WAV, OBJ and warp-path JSON.

A container is ``<stem>.json`` (manifest: per-array shape, dtype, byte offset,
plus free-form metadata) next to ``<stem>.bin`` holding the little-endian
float64 arrays back to back.
"""

from __future__ import annotations

import hashlib
import json
import wave
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError, MissingInputError

DTYPE = "<f8"


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def write_container(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype=DTYPE)
            fh.write(a.tobytes())
            entries[name] = {"shape": list(a.shape), "dtype": DTYPE, "offset": offset}
            offset += a.nbytes
    manifest = {"arrays": entries, "meta": dict(meta or {})}
    manifest_path = stem.with_suffix(".json")
    manifest_path.write_text(canonical_json(manifest))
    return manifest_path


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    mpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not mpath.exists() or not bpath.exists():
        raise MissingInputError(f"container {stem} not found")
    manifest = json.loads(mpath.read_text())
    blob = bpath.read_bytes()
    arrays = {}
    for name, e in manifest["arrays"].items():
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype=e["dtype"], count=count, offset=e["offset"]).reshape(shape).copy()
    return arrays, manifest.get("meta", {})


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- audio


def write_wav(path, samples: np.ndarray, rate: int = 44100) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path):
    from .audiofeat import Waveform

    if not Path(path).exists():
        raise MissingInputError(f"audio file {path} not found")
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ContractError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(data.astype(np.float64) / 32768.0, rate)


# ---------------------------------------------------------------- meshes


def write_obj(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in v.tolist()]
    if faces is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=int).tolist()]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    if not Path(path).exists():
        raise MissingInputError(f"mesh file {path} not found")
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=int).reshape(-1, 3)


# ---------------------------------------------------------------- warp paths


def write_path(path, pairs, t1: int, t2: int, meta: Mapping | None = None) -> None:
    doc = {"T1": int(t1), "T2": int(t2), "path": [[int(i), int(j)] for i, j in pairs]}
    if meta:
        doc["meta"] = dict(meta)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(canonical_json(doc))


def read_path(path) -> tuple[list[tuple[int, int]], int, int]:
    if not Path(path).exists():
        raise MissingInputError(f"path file {path} not found")
    doc = json.loads(Path(path).read_text())
    return [(int(i), int(j)) for i, j in doc["path"]], int(doc["T1"]), int(doc["T2"])
