"""On-disk formats: dataset dumps, checkpoints, prediction files, manifests.

Every writer goes through :func:`atomic_write`, so a crash never leaves a
half-written artifact behind.

Binary container layout (checkpoints and prediction files)::

    <MAGIC> <version>\\n
    key value\\n           (any number of header lines)
    block <name> <d0>x<d1>...\\n   (checkpoints only, in payload order)
    END\\n
    <payload: little-endian float64, C order, blocks back to back>
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetSplit, GroupAssignment, InteractionMatrix, Scale

DATASET_VERSION = 1
CKPT_MAGIC = "DIFFAIREC-CKPT"
CKPT_VERSION = 1
PRED_MAGIC = "DIFFAIREC-PRED"
PRED_VERSION = 1

TRIPLET = np.dtype([("row", "<i4"), ("col", "<i4"), ("value", "<f8")])


class FormatError(ValueError):
    pass


class FingerprintMismatch(RuntimeError):
    def __init__(self, what: str, expected: str, found: str):
        super().__init__(f"{what} fingerprint mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fingerprint(paths) -> str:
    """Combined digest of several files (names and contents, in the given order)."""
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(bytes.fromhex(sha256_file(p)))
    return h.hexdigest()


# ----------------------------------------------------------------------------
# header helpers


def _header_bytes(magic: str, version: int, fields: list[tuple[str, object]]) -> bytes:
    lines = [f"{magic} {version}"]
    for key, value in fields:
        text = _fmt(value)
        if "\n" in text:
            raise ValueError(f"header value for {key!r} contains a newline")
        lines.append(f"{key} {text}")
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _read_header(raw: bytes, magic: str, path) -> tuple[int, list[tuple[str, str]], int]:
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise FormatError(f"{path}: header terminator not found")
    lines = raw[:end].decode("utf-8").split("\n")
    first = lines[0].split(" ")
    if len(first) != 2 or first[0] != magic:
        raise FormatError(f"{path}: not a {magic} file")
    fields = []
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        fields.append((key, value))
    return int(first[1]), fields, end + len(b"\nEND\n")


# ----------------------------------------------------------------------------
# prediction files


def write_predictions(path, pred: np.ndarray, scale: Scale) -> Path:
    """Items x users predictions on the normalized scale plus the scale to undo it."""
    m, n = pred.shape
    head = _header_bytes(PRED_MAGIC, PRED_VERSION, [
        ("m", m), ("n", n), ("scale_scheme", scale.scheme),
        ("scale_lo", float(scale.lo)), ("scale_hi", float(scale.hi)),
    ])
    return atomic_write(path, head + np.ascontiguousarray(pred, dtype="<f8").tobytes())


def read_predictions(path) -> tuple[np.ndarray, Scale]:
    raw = Path(path).read_bytes()
    version, fields, off = _read_header(raw, PRED_MAGIC, path)
    if version != PRED_VERSION:
        raise FormatError(f"{path}: unsupported prediction file version {version}")
    h = dict(fields)
    m, n = int(h["m"]), int(h["n"])
    body = raw[off:]
    if len(body) != 8 * m * n:
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {8 * m * n}")
    pred = np.frombuffer(body, dtype="<f8").reshape(m, n).astype(np.float64)
    scale = Scale(float(h["scale_lo"]), float(h["scale_hi"]), h["scale_scheme"] == "log1p-minmax")
    return pred, scale


# ----------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, header: list[tuple[str, object]], blocks: dict[str, np.ndarray]) -> Path:
    fields = list(header)
    payload = []
    for name, arr in blocks.items():
        if " " in name:
            raise ValueError(f"block name {name!r} contains a space")
        arr = np.asarray(arr, dtype="<f8")
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        fields.append(("block", f"{name} {shape}"))
        payload.append(np.ascontiguousarray(arr).tobytes())
    return atomic_write(path, _header_bytes(CKPT_MAGIC, CKPT_VERSION, fields) + b"".join(payload))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    version, fields, off = _read_header(raw, CKPT_MAGIC, path)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header, blocks = {}, {}
    for key, value in fields:
        if key != "block":
            header[key] = value
            continue
        name, shape_txt = value.split(" ")
        shape = () if shape_txt == "scalar" else tuple(int(d) for d in shape_txt.split("x"))
        size = int(np.prod(shape)) if shape else 1
        nbytes = 8 * size
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated block {name!r}")
        blocks[name] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after the last block")
    return header, blocks


# ----------------------------------------------------------------------------
# dataset dumps


@dataclass
class DatasetDump:
    matrix: InteractionMatrix
    split: DatasetSplit
    groups: GroupAssignment
    fingerprint: str
    kind: str = ""


DUMP_FILES = ("header.txt", "item_ids.txt", "user_ids.txt", "groups.txt", "triplets.bin", "split.bin")


def write_dataset(directory, mat: InteractionMatrix, split: DatasetSplit, groups: GroupAssignment,
                  kind: str = "") -> str:
    """Write a canonical dump and return its fingerprint.

    ``triplets.bin`` holds (row <i4, col <i4, normalized value <f8) for every
    observed cell in row-major order; ``split.bin`` holds one <i1 split code
    per triplet (1 train, 2 val, 3 test).
    """
    d = Path(directory)
    m, n = mat.shape
    rows, cols = np.nonzero(mat.M)
    trip = np.empty(len(rows), dtype=TRIPLET)
    trip["row"], trip["col"], trip["value"] = rows, cols, mat.R[rows, cols]
    codes = split.codes()[rows, cols].astype("<i1")
    if np.any(codes == 0):
        raise ValueError("every observed cell must belong to a split")
    header = "\n".join([
        f"version {DATASET_VERSION}", f"kind {kind}", f"m {m}", f"n {n}", f"nnz {len(rows)}",
        f"normalization {mat.scale.scheme}", f"scale_params {mat.scale.lo!r} {mat.scale.hi!r}",
        f"attribute {groups.attribute}",
    ]) + "\n"
    atomic_write(d / "header.txt", header)
    atomic_write(d / "item_ids.txt", "".join(f"{int(v)}\n" for v in mat.item_ids))
    atomic_write(d / "user_ids.txt", "".join(f"{int(v)}\n" for v in mat.user_ids))
    atomic_write(d / "groups.txt", "".join(f"{int(v)}\n" for v in groups.s))
    atomic_write(d / "triplets.bin", trip.tobytes())
    atomic_write(d / "split.bin", codes.tobytes())
    return dataset_fingerprint(d)


def dataset_fingerprint(directory) -> str:
    return fingerprint([Path(directory) / f for f in DUMP_FILES])


def read_dataset(directory) -> DatasetDump:
    d = Path(directory)
    missing = [f for f in DUMP_FILES if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: dataset dump incomplete, missing {', '.join(missing)}; run ingest first")
    h = {}
    for line in (d / "header.txt").read_text().splitlines():
        key, _, value = line.partition(" ")
        h[key] = value
    if int(h["version"]) != DATASET_VERSION:
        raise FormatError(f"{d}: unsupported dataset version {h['version']}")
    m, n = int(h["m"]), int(h["n"])
    lo, hi = (float(x) for x in h["scale_params"].split())
    scale = Scale(lo, hi, h["normalization"] == "log1p-minmax")
    item_ids = np.loadtxt(d / "item_ids.txt", dtype=np.int64, ndmin=1)
    user_ids = np.loadtxt(d / "user_ids.txt", dtype=np.int64, ndmin=1)
    s = np.loadtxt(d / "groups.txt", dtype=np.int8, ndmin=1)
    trip = np.frombuffer((d / "triplets.bin").read_bytes(), dtype=TRIPLET)
    codes = np.frombuffer((d / "split.bin").read_bytes(), dtype="<i1")
    if len(trip) != int(h["nnz"]) or len(codes) != len(trip):
        raise FormatError(f"{d}: triplet count does not match header nnz {h['nnz']}")
    if len(item_ids) != m or len(user_ids) != n or len(s) != n:
        raise FormatError(f"{d}: id maps do not match header dimensions {m}x{n}")
    R = np.zeros((m, n))
    M = np.zeros((m, n), dtype=np.int8)
    C = np.zeros((m, n), dtype=np.int8)
    R[trip["row"], trip["col"]] = trip["value"]
    M[trip["row"], trip["col"]] = 1
    C[trip["row"], trip["col"]] = codes
    mat = InteractionMatrix(R, M, item_ids, user_ids, scale)
    return DatasetDump(mat, DatasetSplit.from_codes(C), GroupAssignment(s, h["attribute"]),
                       dataset_fingerprint(d), h.get("kind", ""))


# ----------------------------------------------------------------------------
# text exports and manifests


def write_loss_history(path, history) -> Path:
    return atomic_write(path, "".join(f"{e} {v!r}\n" for e, v in enumerate(history, start=1)))


def read_loss_history(path) -> list[float]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(float(line.split()[1]))
    return out


def write_manifest(path, stage: str, status: str, config_hash: str, seed: int,
                   inputs: dict[str, str], artifacts: list | tuple = (), extra: dict | None = None) -> Path:
    from . import __version__

    arts = {}
    for p in artifacts:
        p = Path(p)
        if p.is_file():
            arts[str(p)] = sha256_file(p)
    doc = {
        "stage": stage,
        "status": status,
        "config_hash": config_hash,
        "code_version": __version__,
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "inputs": inputs,
        "artifacts": arts,
    }
    if extra:
        doc.update(extra)
    return atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
