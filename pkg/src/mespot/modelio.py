"""Versioned binary persistence for the autoencoder and the bag mixtures.

Layout: an 8-byte magic, a u32 format version, a length-prefixed UTF-8
key=value metadata block (architecture description), then the autoencoder
parameters as little-endian float32 blocks in declared order (each prefixed
with its element count as a consistency check). An optional mixture section
follows: bag count, then per bag its index, component count, dimension, and
the weights/means/covariances as little-endian float64. Loading rejects any
magic or version mismatch.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .density import GmmModel
from .rcae import RcaeArch, RcaeModel, param_specs

MAGIC = b"MESPOTML"
FORMAT_VERSION = 1


def _write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _read_u32(fh) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError("model file truncated")
    return struct.unpack("<I", raw)[0]


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("model file truncated")
    return raw


def save_model(path: str | Path, model: RcaeModel, gmms: list[GmmModel] | None = None) -> None:
    arch = model.arch
    meta = (
        f"block_size={arch.block_size}\n"
        f"conv_filters={arch.conv_filters}\n"
        f"lstm_filters={arch.lstm_filters}\n"
        f"kernel_size={arch.kernel_size}\n"
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, FORMAT_VERSION)
        _write_u32(fh, len(meta))
        fh.write(meta)
        for name, shape, _ in param_specs(arch):
            block = np.ascontiguousarray(model.params[name], dtype="<f4")
            if block.shape != shape:
                raise ValueError(f"parameter {name} has shape {block.shape}, expected {shape}")
            _write_u32(fh, block.size)
            fh.write(block.tobytes())
        gmms = gmms or []
        _write_u32(fh, len(gmms))
        for gmm in gmms:
            _write_u32(fh, gmm.bag_index)
            _write_u32(fh, gmm.n_components)
            _write_u32(fh, gmm.dim)
            red = gmm.reduction.encode("utf-8")
            _write_u32(fh, len(red))
            fh.write(red)
            for arr in (gmm.weights, gmm.means, gmm.covs):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | Path) -> tuple[RcaeModel, list[GmmModel]]:
    """Load a model file; returns (autoencoder, mixtures) where the mixture
    list is empty if no density section was appended."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a model file (bad magic)")
        version = _read_u32(fh)
        if version != FORMAT_VERSION:
            raise ValueError(
                f"{path} has format version {version}, this build reads {FORMAT_VERSION}"
            )
        meta_len = _read_u32(fh)
        meta = {}
        for line in _read_exact(fh, meta_len).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            meta[key] = value
        arch = RcaeArch(
            block_size=int(meta["block_size"]),
            conv_filters=int(meta["conv_filters"]),
            lstm_filters=int(meta["lstm_filters"]),
            kernel_size=int(meta["kernel_size"]),
        )
        params: dict[str, np.ndarray] = {}
        for name, shape, _ in param_specs(arch):
            count = _read_u32(fh)
            expected = int(np.prod(shape))
            if count != expected:
                raise ValueError(f"parameter {name}: stored {count} values, expected {expected}")
            raw = _read_exact(fh, 4 * count)
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        model = RcaeModel(arch=arch, params=params)
        gmms: list[GmmModel] = []
        n_bags = _read_u32(fh)
        for _ in range(n_bags):
            bag_index = _read_u32(fh)
            m = _read_u32(fh)
            d = _read_u32(fh)
            red_len = _read_u32(fh)
            reduction = _read_exact(fh, red_len).decode("utf-8")
            weights = np.frombuffer(_read_exact(fh, 8 * m), dtype="<f8").copy()
            means = np.frombuffer(_read_exact(fh, 8 * m * d), dtype="<f8").reshape(m, d).copy()
            covs = np.frombuffer(_read_exact(fh, 8 * m * d * d), dtype="<f8").reshape(m, d, d).copy()
            gmms.append(GmmModel(bag_index, weights, means, covs, reduction))
    return model, gmms
