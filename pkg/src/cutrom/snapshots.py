"""Binary snapshot container and the plain-text artifact manifest.

Container layout: magic "CUTROM1\\0", version u32, velocity and pressure dof
counts u32, theta f64, time f64, one field-kind byte, then the payload as
little-endian float64, row-major.  One file per field per (theta, t); basis
matrices reuse the container with a basis kind tag and their column count
inferred from the payload size.

The manifest lists every entry on its own line; lines starting with '#'
(timings and the like) are excluded from the deterministic manifest hash.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import MissingSnapshot, ShapeMismatch

MAGIC = b"CUTROM1\x00"
VERSION = 1

KIND_VELOCITY0 = 0
KIND_SUPREMIZER = 1
KIND_PRESSURE = 2
KIND_BASIS_VELOCITY = 10
KIND_BASIS_SUPREMIZER = 11
KIND_BASIS_PRESSURE = 12

FIELD_KINDS = {"velocity0": KIND_VELOCITY0, "supremizer": KIND_SUPREMIZER,
               "pressure": KIND_PRESSURE}
BASIS_KINDS = {"velocity0": KIND_BASIS_VELOCITY,
               "supremizer": KIND_BASIS_SUPREMIZER,
               "pressure": KIND_BASIS_PRESSURE}

_HEADER = struct.Struct("<8sIIIddB")


def _rows_for_kind(kind, nu, npr):
    if kind in (KIND_PRESSURE, KIND_BASIS_PRESSURE):
        return npr
    return nu


def write_container(path, data, nu, npr, theta, t, kind):
    data = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype="<f8").T).T)
    rows = _rows_for_kind(kind, nu, npr)
    if data.shape[0] != rows:
        raise ShapeMismatch(
            f"{path}: payload rows {data.shape[0]} != expected {rows}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, nu, npr,
                              float(theta), float(t), kind))
        fh.write(data.tobytes(order="C"))


def read_container(path):
    try:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            magic, version, nu, npr, theta, t, kind = _HEADER.unpack(head)
            if magic != MAGIC:
                raise ShapeMismatch(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise ShapeMismatch(f"{path}: unsupported version {version}")
            payload = np.frombuffer(fh.read(), dtype="<f8")
    except FileNotFoundError:
        raise MissingSnapshot(f"snapshot file {path} does not exist")
    rows = _rows_for_kind(kind, nu, npr)
    if payload.size % rows:
        raise ShapeMismatch(f"{path}: payload size {payload.size} not a "
                            f"multiple of {rows}")
    cols = payload.size // rows
    data = payload.reshape(rows, cols)
    return {"nu": nu, "np": npr, "theta": theta, "t": t, "kind": kind,
            "data": data if cols > 1 else data[:, 0]}


def write_snapshot(path, vec, nu, npr, theta, t, field):
    write_container(path, np.asarray(vec, dtype=float)[:, None], nu, npr,
                    theta, t, FIELD_KINDS[field])


def write_basis(path, matrix, nu, npr, field):
    write_container(path, matrix, nu, npr, 0.0, 0.0, BASIS_KINDS[field])


def manifest_hash(text):
    """SHA-256 over the deterministic (non-comment) manifest lines."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    return digest


def write_manifest(path, lines, comments=()):
    with open(path, "w") as fh:
        for ln in lines:
            fh.write(ln + "\n")
        for ln in comments:
            fh.write("# " + ln + "\n")


def read_manifest(path):
    try:
        text = open(path).read()
    except FileNotFoundError:
        raise MissingSnapshot(f"manifest {path} does not exist")
    lines = [ln for ln in text.splitlines()
             if ln and not ln.startswith("#")]
    return lines, text
