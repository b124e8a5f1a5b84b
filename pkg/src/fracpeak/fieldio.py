"""Field serialization: 32-byte binary header + little-endian float64 payload + JSON sidecar.

Header layout (32 bytes):
    0:4   magic b"FPKF"
    4:6   format version, uint16
    6:8   ndim, uint16
    8:12  nx, uint32
    12:16 ny, uint32 (0 in 1D)
    16:20 flags, uint32 (bit 0: exterior_zero)
    20:24 reserved, uint32
    24:32 grid spacing h, float64

The sidecar <path>.json carries the domain metadata needed to rebuild the
Domain (shape, epsilon, pad factor, delta_star).
"""

import json
import struct
from pathlib import Path

import numpy as np

from .gridcore import Domain, Field

_MAGIC = b"FPKF"
_VERSION = 1
_HEADER = struct.Struct("<4sHHIIII d")


def _domain_meta(domain):
    kind = domain.shape[0]
    if kind == "box":
        geom = {"kind": "box", "lo": list(np.atleast_1d(domain.shape[1]).astype(float)),
                "hi": list(np.atleast_1d(domain.shape[2]).astype(float))}
    else:
        geom = {"kind": "ball", "center": list(np.atleast_1d(domain.shape[1]).astype(float)),
                "radius": float(domain.shape[2])}
    return {
        "n": domain.n,
        "geometry": geom,
        "epsilon": domain.epsilon,
        "h": domain.h,
        "pad_factor": domain.pad_factor,
        "delta_star": domain.delta_star,
        "dims": list(domain.dims),
    }


def domain_from_meta(meta):
    geom = meta["geometry"]
    if geom["kind"] == "box":
        shape = ("box", np.array(geom["lo"]), np.array(geom["hi"]))
    else:
        shape = ("ball", np.array(geom["center"]), geom["radius"])
    return Domain(meta["n"], shape, meta["epsilon"], meta["h"],
                  pad_factor=meta["pad_factor"], delta_star=meta["delta_star"])


def write_field(path, f):
    path = Path(path)
    nx = f.domain.dims[0]
    ny = f.domain.dims[1] if f.domain.n == 2 else 0
    flags = 1 if f.exterior_zero else 0
    header = _HEADER.pack(_MAGIC, _VERSION, f.domain.n, nx, ny, flags, 0, f.domain.h)
    payload = np.ascontiguousarray(f.values, dtype="<f8").tobytes()
    path.write_bytes(header + payload)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(_domain_meta(f.domain), indent=2))
    return path


def read_field(path, domain=None):
    path = Path(path)
    raw = path.read_bytes()
    magic, version, ndim, nx, ny, flags, _res, h = _HEADER.unpack(raw[: _HEADER.size])
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a field file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = (nx,) if ndim == 1 else (nx, ny)
    vals = np.frombuffer(raw[_HEADER.size:], dtype="<f8").reshape(dims).copy()
    if domain is None:
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        domain = domain_from_meta(meta)
    if domain.dims != dims or abs(domain.h - h) > 1e-12 * h:
        raise ValueError(f"{path}: header inconsistent with domain")
    return Field(domain, vals, exterior_zero=bool(flags & 1))
