"""RVCK tensor container for checkpoints and pretrained-weight imports.

Layout (little-endian)::

    b"RVCK" | u32 version | u32 header_len | header (UTF-8 JSON) | tensors

The header holds ``kind`` ("checkpoint" or "pretrained"), a ``tensors`` list
of ``{"name", "shape"}`` entries in storage order, and kind-specific fields.
Tensor data is raw float32, row-major, concatenated in that order.

Checkpoint headers also carry ``config`` (model configuration, including
the label map) and ``stats`` (magnitude-row standardisation or null).

Pretrained headers carry ``grid`` = [rows, cols] of the source patch grid and
tensors named:

``patch_embed.proj.weight``  (D, 3, ph, pw) RGB patch kernel
``patch_embed.proj.bias``    (D,)
``pos_embed``                (rows*cols + 1, D), [CLS] row first
``cls_token``                (D,), optional

Any further tensor whose name and shape match a model parameter (e.g.
``blocks.0.qkv_w``) is copied verbatim.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .adapt import adapt_channel_average, interpolate_positional, kernel_to_projection
from .errors import AssetError, CheckpointError
from .features import FeatureStats
from .model import ModelConfig, ModelParams, init_params

MAGIC = b"RVCK"
VERSION = 1


def write_container(path, header, tensors):
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_container(path):
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise AssetError(f"missing checkpoint {path}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an RVCK file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, this build reads version {VERSION}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    tensors = OrderedDict()
    off = 12 + hlen
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, "<f4", count=nbytes // 4, offset=off) \
            .reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, tensors


def save_checkpoint(path, params, extra=None):
    header = {"kind": "checkpoint", "config": params.config.to_json(),
              "stats": params.stats.to_json() if params.stats is not None else None}
    if extra:
        header["meta"] = extra
    write_container(path, header, params.tensors)


def load_checkpoint(path):
    header, tensors = read_container(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    try:
        config = ModelConfig.from_json(header["config"])
        stats = FeatureStats.from_json(header["stats"]) if header.get("stats") else None
        return ModelParams(config, tensors, stats)
    except Exception as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def save_pretrained(path, w3, bias, pos_embed, grid, extra_tensors=None):
    """Write foreign weights in the pretrained-import layout."""
    tensors = OrderedDict([("patch_embed.proj.weight", np.asarray(w3)),
                           ("patch_embed.proj.bias", np.asarray(bias)),
                           ("pos_embed", np.asarray(pos_embed))])
    tensors.update(extra_tensors or {})
    write_container(path, {"kind": "pretrained", "grid": list(grid)}, tensors)


def import_pretrained(path, config, seed=0):
    """Initialise a model from image-pretrained weights.

    Channel-averages the RGB patch kernel, resizes the positional table to
    the model's patch grid, copies every matching encoder tensor, and leaves
    the regression head freshly initialised.
    """
    header, tensors = read_container(path)
    if header.get("kind") != "pretrained":
        raise CheckpointError(f"{path}: not a pretrained-import file")
    try:
        w3 = tensors["patch_embed.proj.weight"]
        bias = tensors["patch_embed.proj.bias"]
        pos = tensors["pos_embed"]
        grid = tuple(header["grid"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing {exc}") from exc
    d, _, ph, pw = w3.shape
    if d != config.width or (ph, pw) != config.grid.patch:
        raise CheckpointError(f"{path}: kernel {w3.shape} incompatible with width {config.width}, "
                              f"patch {config.grid.patch}")
    params = init_params(config, seed)
    w1, b1 = adapt_channel_average(w3, bias)
    params.tensors["patch_w"] = kernel_to_projection(w1)
    params.tensors["patch_b"] = b1
    params.tensors["pos"] = interpolate_positional(pos, grid, config.grid)
    if "cls_token" in tensors and tensors["cls_token"].size == d:
        params.tensors["cls"] = tensors["cls_token"].reshape(d).copy()
    for name, value in tensors.items():
        if name in params.tensors and name not in ("head_w", "head_b") \
                and value.shape == params.tensors[name].shape:
            params.tensors[name] = value.copy()
    return params
