"""Snapshot packs, JSON reports and file digests.

A snapshot pack is a one-line text header followed by raw little-endian
float64 pairs ``(re, im)`` for every coefficient of every snapshot, in basis
order::

    SNLS1 d=1 N=8 p=7.0 s=2.0 eps=0.1

The number of snapshots follows from the file size.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .spectral import ModeBasis, SpectralField, build_basis

__all__ = ["MAGIC", "write_pack", "read_pack", "write_json", "read_json", "sha256_file", "json_ready"]

MAGIC = "SNLS1"
_KEYS = ("d", "N", "p", "s", "eps")


def _header(d: int, N: int, p: float, s: float, eps: float) -> bytes:
    vals = {"d": int(d), "N": int(N), "p": float(p), "s": float(s), "eps": float(eps)}
    return (MAGIC + " " + " ".join(f"{k}={vals[k]!r}" for k in _KEYS) + "\n").encode("ascii")


def write_pack(path, basis: ModeBasis, coeffs, p: float, s: float, eps: float) -> Path:
    """Write snapshots of shape ``(n, n_modes)`` (or one field) to ``path``."""
    if isinstance(coeffs, SpectralField):
        coeffs = coeffs.coeffs
    c = np.atleast_2d(np.asarray(coeffs, dtype=np.complex128))
    if c.shape[1] != basis.n_modes:
        raise ValueError("coefficient count does not match the basis")
    pairs = np.empty(c.shape + (2,), dtype="<f8")
    pairs[..., 0] = c.real
    pairs[..., 1] = c.imag
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_header(basis.d, basis.N, p, s, eps))
        fh.write(pairs.tobytes())
    return path


def read_pack(path):
    """Read a pack; returns ``(header dict, basis, coeffs)``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        body = fh.read()
    try:
        text = line.decode("ascii").strip().split()
    except UnicodeDecodeError:
        raise ValueError("not a snapshot pack") from None
    if not text or text[0] != MAGIC:
        raise ValueError("bad magic in snapshot pack")
    header = {}
    for tok in text[1:]:
        k, _, v = tok.partition("=")
        header[k] = int(v) if k in ("d", "N") else float(v)
    if set(header) != set(_KEYS):
        raise ValueError(f"incomplete header: {sorted(header)}")
    # the stored N is the effective cutoff, so an index cutoff rebuilds it
    basis = build_basis(header["d"], header["N"], full_shell=False)
    n = basis.n_modes
    if len(body) % (16 * n):
        raise ValueError("truncated snapshot pack")
    pairs = np.frombuffer(body, dtype="<f8").reshape(-1, n, 2)
    return header, basis, pairs[..., 0] + 1j * pairs[..., 1]


def json_ready(obj):
    """Convert numpy containers to plain JSON types; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_ready(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(json_ready(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
