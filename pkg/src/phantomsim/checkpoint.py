"""Binary checkpoint container for sharded models.

Layout, all little endian:

    magic     8 bytes  b"PSHARD01"
    mode      u8       0 = phantom, 1 = tensor
    n, p, k, layers, seed   i64 each (k = 0 in tensor mode)
    activations             one u8 per layer (0 = relu, 1 = identity)
    matrices  raw float64, row major, in this order:
        phantom: for each rank, for each layer: local, compressor,
                 decompressors in ascending source-rank order (self
                 excluded), bias
        tensor:  for each rank, for each layer: weight block, bias
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import Activation
from .errors import ConfigurationError
from .phantom import PhantomLayer, PhantomModel
from .tensor_parallel import TPLayer, TPModel

MAGIC = b"PSHARD01"
_HEADER = struct.Struct("<8sBqqqqq")
_ACT_CODE = {Activation.RELU: 0, Activation.IDENTITY: 1}
_ACT_FROM = {code: act for act, code in _ACT_CODE.items()}


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh, shape) -> np.ndarray:
    count = int(np.prod(shape))
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise ConfigurationError("checkpoint truncated")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_model(path, model: PhantomModel | TPModel) -> None:
    """Write a phantom or tensor model to a checkpoint file."""
    path = Path(path)
    is_pp = isinstance(model, PhantomModel)
    if not is_pp and not isinstance(model, TPModel):
        raise ConfigurationError(f"cannot checkpoint a {type(model).__name__}")
    k = model.k if is_pp else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, 0 if is_pp else 1,
                              model.n, model.p, k, model.layer_count, model.seed))
        fh.write(bytes(_ACT_CODE[a] for a in model.activations))
        for rank in range(model.p):
            for layer in model.rank_layers[rank]:
                if is_pp:
                    _write_array(fh, layer.local)
                    _write_array(fh, layer.compressor)
                    for i in sorted(layer.decompressors):
                        _write_array(fh, layer.decompressors[i])
                    _write_array(fh, layer.bias)
                else:
                    _write_array(fh, layer.weight)
                    _write_array(fh, layer.bias)


def load_model(path) -> PhantomModel | TPModel:
    """Read a checkpoint written by save_model."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ConfigurationError(f"{path}: not a checkpoint (short header)")
        magic, mode, n, p, k, layers, seed = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ConfigurationError(f"{path}: bad magic {magic!r}")
        if mode not in (0, 1):
            raise ConfigurationError(f"{path}: unknown mode byte {mode}")
        act_bytes = fh.read(layers)
        if len(act_bytes) != layers:
            raise ConfigurationError(f"{path}: truncated activation table")
        try:
            acts = [_ACT_FROM[b] for b in act_bytes]
        except KeyError as exc:
            raise ConfigurationError(f"{path}: unknown activation code {exc}") from None
        s = n // p
        rank_layers = []
        for rank in range(p):
            own = []
            for _ in range(layers):
                if mode == 0:
                    local = _read_array(fh, (s, s))
                    comp = _read_array(fh, (k, s))
                    decs = {i: _read_array(fh, (s, k))
                            for i in range(p) if i != rank}
                    bias = _read_array(fh, (s,))
                    own.append(PhantomLayer(local, comp, decs, bias))
                else:
                    weight = _read_array(fh, (s, n))
                    bias = _read_array(fh, (s,))
                    own.append(TPLayer(weight, bias))
            rank_layers.append(own)
        if fh.read(1):
            raise ConfigurationError(f"{path}: trailing bytes after matrices")
    if mode == 0:
        return PhantomModel(n, p, k, acts, rank_layers, seed)
    return TPModel(n, p, acts, rank_layers, seed)
