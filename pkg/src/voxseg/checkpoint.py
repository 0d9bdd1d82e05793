"""Checkpoint files: a text header with a JSON manifest, then raw array bytes.

Layout:

    line 1: ``VOXCKPT1``
    line 2: one JSON object — format version, model config, optimizer
            hyperparameters, caller extras, and an array manifest with
            name/kind/dtype/shape/offset/nbytes per array
    then:   the arrays' bytes, concatenated in manifest order, all
            little-endian, offsets relative to the end of the header.

Saved arrays are the model parameters, any batch-norm running buffers, and
(when present) the Adam moment buffers. Loading rebuilds the model from the
embedded config and restores every byte exactly, so save/load round-trips
are bitwise."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError
from .network import Model, ModelConfig, build_model, model_config_from_dict, model_config_to_dict
from .optim import AdamState

MAGIC = b"VOXCKPT1\n"
FORMAT_VERSION = 1


def _le(dtype: np.dtype) -> str:
    """Little-endian type string for the manifest ('<f4', '<i8', ...)."""
    return np.dtype(dtype).newbyteorder("<").str


def _collect_arrays(model: Model, adam: Optional[AdamState]):
    """(name, kind, array) triples in a deterministic order."""
    items = []
    for p in model.store.params():
        items.append((p.name, p.kind, p.tensor.data))
    for name in sorted(model.bn_states):
        st = model.bn_states[name]
        items.append((name + ".running_mean", "buffer", st.running_mean))
        items.append((name + ".running_var", "buffer", st.running_var))
        items.append((name + ".num_batches", "buffer", np.array([st.num_batches_tracked], dtype=np.int64)))
    if adam is not None:
        for key in sorted(adam.m):
            items.append(("adam.m." + key, "opt", adam.m[key]))
        for key in sorted(adam.v):
            items.append(("adam.v." + key, "opt", adam.v[key]))
    return items


def save_checkpoint(path, model: Model, adam: Optional[AdamState] = None, extra: Optional[dict] = None) -> None:
    """Write the model (and optionally optimizer state) to ``path``.

    ``extra`` must be JSON-serializable; the trainer stores epoch counters
    and run configuration there.
    """
    items = _collect_arrays(model, adam)
    manifest = []
    offset = 0
    for name, kind, arr in items:
        nbytes = arr.size * arr.itemsize
        manifest.append(
            {
                "name": name,
                "kind": kind,
                "dtype": _le(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model_config_to_dict(model.config),
        "model_dtype": _le(model.dtype),
        "optimizer": None
        if adam is None
        else {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t},
        "extra": extra or {},
        "total_bytes": offset,
        "arrays": manifest,
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for _, _, arr in items:
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


@dataclass
class Checkpoint:
    model: Model
    adam: Optional[AdamState]
    extra: dict
    config: ModelConfig


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``, byte-exactly."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header_line = f.readline()
        if not header_line.endswith(b"\n"):
            raise FormatError(f"{path}: truncated checkpoint header")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: unreadable checkpoint header: {e}") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        blob = f.read()
    if len(blob) != header["total_bytes"]:
        raise FormatError(f"{path}: expected {header['total_bytes']} data bytes, found {len(blob)}")

    arrays = {}
    kinds = {}
    for ent in header["arrays"]:
        start, n = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(blob, dtype=np.dtype(ent["dtype"]), count=n // np.dtype(ent["dtype"]).itemsize, offset=start)
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
        kinds[ent["name"]] = ent["kind"]

    config = model_config_from_dict(header["model_config"])
    model = build_model(config, seed=0, dtype=np.dtype(header["model_dtype"]).type, init_params=False)
    for p in model.store.params():
        if p.name not in arrays:
            raise FormatError(f"{path}: missing parameter {p.name!r}")
        src = arrays.pop(p.name)
        if src.shape != p.tensor.data.shape:
            raise FormatError(f"{path}: shape mismatch for {p.name!r}: {src.shape} vs {p.tensor.data.shape}")
        p.tensor.data = src.astype(p.tensor.data.dtype, copy=False)
    for name, st in model.bn_states.items():
        try:
            st.running_mean = arrays.pop(name + ".running_mean")
            st.running_var = arrays.pop(name + ".running_var")
            st.num_batches_tracked = int(arrays.pop(name + ".num_batches")[0])
        except KeyError as e:
            raise FormatError(f"{path}: missing norm buffer {e.args[0]!r}") from None

    adam = None
    if header["optimizer"] is not None:
        opt = header["optimizer"]
        adam = AdamState(beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"], t=int(opt["t"]))
        for name in list(arrays):
            if name.startswith("adam.m."):
                adam.m[name[len("adam.m.") :]] = arrays.pop(name)
            elif name.startswith("adam.v."):
                adam.v[name[len("adam.v.") :]] = arrays.pop(name)
        missing = {p.name for p in model.store.params()} - set(adam.m)
        if missing:
            raise FormatError(f"{path}: optimizer moments missing for {sorted(missing)[:3]}...")
    if arrays:
        raise FormatError(f"{path}: unrecognized arrays in checkpoint: {sorted(arrays)[:3]}")
    return Checkpoint(model=model, adam=adam, extra=header["extra"], config=config)
