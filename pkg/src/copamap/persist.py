"""Versioned model files: a text header followed by length-prefixed binary sections.

Arrays travel as ``.npy`` bytes and scalars as JSON (which writes floats with
``repr``), so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .baselines import FremenModel, GPHomModel, MLModel
from .data import GridSpec, Scaler
from .errors import ModelFileError
from .kernels import KernelSpec
from .predict import CopaMapModel
from .spectral import InducingInit, PeriodicInit
from .svgp import VariationalState

MAGIC = "COPAMAP-MODEL"
FORMAT_VERSION = 1
KINDS = ("copamap", "gphom", "ml", "fremen", "init")


# ---------------------------------------------------------------------------
# encoding helpers
# ---------------------------------------------------------------------------


def _arr(a) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.asarray(a), allow_pickle=False)
    return buf.getvalue()


def _unarr(b: bytes) -> np.ndarray:
    return np.load(io.BytesIO(b), allow_pickle=False)


def _kv(d: dict) -> bytes:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in d.items()).encode()


def _unkv(b: bytes) -> dict:
    out = {}
    for line in b.decode().splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            out[key] = json.loads(value)
    return out


def _grid_kv(g: GridSpec) -> dict:
    return {"r_s": g.r_s, "tau": g.tau, "origin": list(g.origin), "t0": g.t0, "shape": list(g.shape)}


def _grid(d: dict) -> GridSpec:
    return GridSpec(d["r_s"], d["tau"], tuple(d["origin"]), d["t0"], tuple(d["shape"]))


def _spec_kv(s: KernelSpec) -> dict:
    return {"l_s": s.l_s, "sigma2_s": s.sigma2_s, "periodic": [list(p) for p in s.periodic],
            "l_g": s.l_g, "sigma2_g": s.sigma2_g, "g_time_scale": s.g_time_scale,
            "jitter": s.jitter, "const_variance": s.const_variance}


def _spec(d: dict) -> KernelSpec:
    return KernelSpec(**{**d, "periodic": tuple(tuple(p) for p in d["periodic"])})


def _state_sections(st: VariationalState) -> dict:
    return {"state": _kv({"g_mean": float(st.g_mean), "f_mean": float(st.f_mean)}), "Z": _arr(st.Z),
            "mu_f": _arr(st.mu_f), "L_f": _arr(st.L_f), "mu_g": _arr(st.mu_g), "L_g": _arr(st.L_g)}


def _state(sec: dict) -> VariationalState:
    kv = _unkv(sec["state"])
    return VariationalState(_unarr(sec["Z"]), _unarr(sec["mu_f"]), _unarr(sec["L_f"]),
                            _unarr(sec["mu_g"]), _unarr(sec["L_g"]), kv["g_mean"], kv["f_mean"])


def _kind_of(obj) -> str:
    if isinstance(obj, tuple) and len(obj) == 2 and isinstance(obj[0], PeriodicInit):
        return "init"
    kind = getattr(obj, "kind", None)
    if kind not in KINDS:
        raise ModelFileError(f"cannot save objects of type {type(obj).__name__}")
    return kind


def _sections(obj, kind: str) -> dict:
    if kind == "copamap":
        return {"grid": _kv(_grid_kv(obj.grid)), "spec": _kv(_spec_kv(obj.spec)),
                "scaler": _kv({"mean": obj.scaler.mean, "std": obj.scaler.std, "quad_order": obj.quad_order}),
                **_state_sections(obj.state), "observed_cells": _arr(obj.observed_cells)}
    if kind == "gphom":
        return {"grid": _kv(_grid_kv(obj.grid)), "spec": _kv(_spec_kv(obj.spec)),
                **_state_sections(obj.state), "observed_cells": _arr(obj.observed_cells)}
    if kind == "ml":
        return {"grid": _kv(_grid_kv(obj.grid)), "fallback": _kv({"fallback": obj.fallback}),
                "cells": _arr(obj.cells), "rates": _arr(obj.rates)}
    if kind == "fremen":
        return {"grid": _kv(_grid_kv(obj.grid)), "fallback": _kv({"fallback": obj.fallback}),
                "cells": _arr(obj.cells), "dc": _arr(obj.dc), "ptr": _arr(obj.ptr),
                "coeffs": _arr(obj.coeffs), "periods": _arr(obj.periods)}
    periodic, inducing = obj
    return {"periodic": _kv({"psi": int(periodic.psi), "gamma_hat": list(map(float, periodic.gamma_hat)),
                             "sigma2_hat": list(map(float, periodic.sigma2_hat))}),
            "inducing": _kv({"alpha": inducing.alpha}), "Z": _arr(inducing.Z)}


def _build(kind: str, sec: dict):
    if kind == "copamap":
        sc = _unkv(sec["scaler"])
        return CopaMapModel(_state(sec), _spec(_unkv(sec["spec"])), Scaler(sc["mean"], sc["std"]),
                            _grid(_unkv(sec["grid"])), _unarr(sec["observed_cells"]), sc["quad_order"])
    if kind == "gphom":
        return GPHomModel(_state(sec), _spec(_unkv(sec["spec"])), _grid(_unkv(sec["grid"])),
                          _unarr(sec["observed_cells"]))
    if kind == "ml":
        return MLModel(_grid(_unkv(sec["grid"])), _unarr(sec["cells"]), _unarr(sec["rates"]),
                       _unkv(sec["fallback"])["fallback"])
    if kind == "fremen":
        return FremenModel(_grid(_unkv(sec["grid"])), _unarr(sec["cells"]), _unarr(sec["dc"]),
                           _unarr(sec["ptr"]), _unarr(sec["coeffs"]), _unarr(sec["periods"]),
                           _unkv(sec["fallback"])["fallback"])
    per = _unkv(sec["periodic"])
    return (PeriodicInit(per["psi"], per["gamma_hat"], per["sigma2_hat"]),
            InducingInit(_unarr(sec["Z"]), _unkv(sec["inducing"])["alpha"]))


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------


def save_model(obj, path, provenance: dict | None = None) -> str:
    """Write a model (or a ``(PeriodicInit, InducingInit)`` pair); returns the body digest."""
    kind = _kind_of(obj)
    sections = _sections(obj, kind)
    sections["provenance"] = json.dumps(provenance or {}, sort_keys=True).encode()
    body = bytearray()
    for name, data in sections.items():
        raw = name.encode()
        body += struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(data)) + data
    digest = hashlib.sha256(body).hexdigest()
    header = (f"{MAGIC}\nformat: {FORMAT_VERSION}\nkind: {kind}\nbody_bytes: {len(body)}\n"
              f"sha256: {digest}\n\n").encode()
    Path(path).write_bytes(header + bytes(body))
    return digest


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n\n")
    if not sep:
        raise ModelFileError(f"{path}: missing header terminator")
    lines = head.decode("utf-8", errors="replace").split("\n")
    if lines[0] != MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    meta = dict(line.split(": ", 1) for line in lines[1:] if ": " in line)
    try:
        version = int(meta["format"])
    except (KeyError, ValueError):
        raise ModelFileError(f"{path}: header lacks a format version") from None
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    if int(meta.get("body_bytes", -1)) != len(body) or hashlib.sha256(body).hexdigest() != meta.get("sha256"):
        raise ModelFileError(f"{path}: checksum mismatch (truncated or corrupted file)")
    return meta, body


def _split(body: bytes) -> dict:
    out, pos = {}, 0
    while pos < len(body):
        (n,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2:pos + 2 + n].decode()
        (m,) = struct.unpack_from("<Q", body, pos + 2 + n)
        start = pos + 10 + n
        out[name] = body[start:start + m]
        pos = start + m
    return out


def load_model(path, kind: str | None = None):
    """Load a model file; with ``kind`` the stored kind must match."""
    meta, body = read_header(path)
    stored = meta.get("kind")
    if stored not in KINDS:
        raise ModelFileError(f"{path}: unknown model kind {stored!r}")
    if kind is not None and stored != kind:
        raise ModelFileError(f"{path}: holds a {stored!r} model, expected {kind!r}")
    return _build(stored, _split(body))


def load_provenance(path) -> dict:
    _, body = read_header(path)
    return json.loads(_split(body)["provenance"].decode())


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
