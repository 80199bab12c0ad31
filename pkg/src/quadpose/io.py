"""File formats: PGM/PPM rasters, OBJ meshes with skin sidecars, model archives.

Model archive layout (single file)::

    bytes 0-7    magic b"QPARCH01"
    bytes 8-15   little-endian uint64 N, length of the JSON header
    next N bytes UTF-8 JSON: {"meta": {...}, "blobs": {name: {"offset", "shape"}}}
    remainder    little-endian float64 blobs; offsets are relative to the
                 start of the blob section
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .skeleton import SkinnedMesh

ARCHIVE_MAGIC = b"QPARCH01"


class FormatError(ValueError):
    pass


# -- rasters -----------------------------------------------------------------

def write_pgm16(path, raster) -> None:
    """16-bit greyscale P5 with little-endian samples (millimetres for depth)."""
    r = np.asarray(raster)
    if r.ndim != 2:
        raise FormatError("PGM raster must be 2-D")
    data = np.clip(np.rint(r), 0, 65535).astype("<u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{r.shape[1]} {r.shape[0]}\n65535\n".encode())
        fh.write(data.tobytes())


def write_pgm8(path, raster) -> None:
    r = np.asarray(raster)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{r.shape[1]} {r.shape[0]}\n255\n".encode())
        fh.write(np.clip(r, 0, 255).astype(np.uint8).tobytes())


def _read_netpbm_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise FormatError(f"expected {magic!r} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    return fields, pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), start = _read_netpbm_header(data, b"P5")
    dtype = "<u2" if maxval > 255 else np.uint8
    n = w * h * (2 if maxval > 255 else 1)
    return np.frombuffer(data[start:start + n], dtype=dtype).reshape(h, w).astype(np.int64)


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        fh.write(np.clip(rgb, 0, 255).astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, _), start = _read_netpbm_header(data, b"P6")
    return np.frombuffer(data[start:start + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# -- meshes ------------------------------------------------------------------

def save_mesh(mesh: SkinnedMesh, obj_path, skeleton=None) -> Path:
    """Write ``mesh.obj`` plus ``mesh.skin.json`` holding per-vertex weights."""
    obj_path = Path(obj_path)
    with open(obj_path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")
    side = obj_path.with_suffix(".skin.json")
    entries = [[[int(j), float(w)] for j, w in zip(js, ws) if w > 0]
               for js, ws in zip(mesh.skin_joints, mesh.skin_weights)]
    doc = {"vertex_count": len(mesh.vertices), "weights": entries}
    if skeleton is not None:
        doc["joint_names"] = skeleton.names
    side.write_text(json.dumps(doc))
    return side


def load_mesh(obj_path) -> SkinnedMesh:
    obj_path = Path(obj_path)
    verts, tris = [], []
    for line in obj_path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            for k in range(1, len(idx) - 1):       # fan-triangulate polygons
                tris.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
    doc = json.loads(obj_path.with_suffix(".skin.json").read_text())
    if doc["vertex_count"] != len(verts):
        raise FormatError("skin sidecar vertex count does not match OBJ")
    width = max(len(e) for e in doc["weights"])
    sj = np.zeros((len(verts), width), dtype=np.int64)
    sw = np.zeros((len(verts), width))
    for i, e in enumerate(doc["weights"]):
        for k, (j, w) in enumerate(e):
            sj[i, k], sw[i, k] = j, w
    return SkinnedMesh(np.array(verts), np.array(tris, dtype=np.int64), sj, sw)


# -- archives ----------------------------------------------------------------

def write_archive(path, meta: dict, arrays: dict) -> None:
    blobs, chunks, offset = {}, [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        blobs[name] = {"offset": offset, "shape": list(a.shape)}
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta, "blobs": blobs}).encode()
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC + struct.pack("<Q", len(header)) + header)
        for c in chunks:
            fh.write(c)


def read_archive(path):
    data = Path(path).read_bytes()
    if data[:8] != ARCHIVE_MAGIC:
        raise FormatError(f"{path} is not a model archive")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    base = 16 + n
    arrays = {}
    for name, b in header["blobs"].items():
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        start = base + b["offset"]
        arrays[name] = np.frombuffer(data[start:start + 8 * count], dtype="<f8").reshape(b["shape"]).copy()
    return header["meta"], arrays
