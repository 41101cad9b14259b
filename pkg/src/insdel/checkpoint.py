"""Binary checkpoints: both decoders, both Adam states, configs and step counter.

Layout (all integers little-endian)::

    b"IDT1"  u32 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    u32 n_tensors
    n_tensors x { u16 name_len, name, u8 rank, rank x u32 dim, float32 payload }

Tensor names are ``ins/<param>``, ``del/<param>`` and ``{ins,del}_adam_{m,v}/<param>``.
"""

from __future__ import annotations

import json
import os
import struct
from typing import BinaryIO

import numpy as np

from .autodiff import AdamState, Tensor
from .training import TrainConfig, TrainState
from .transformer import DecoderParams, ModelConfig

MAGIC = b"IDT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_table(state: TrainState) -> list[tuple[str, np.ndarray]]:
    table = []
    for prefix, params, opt in (("ins", state.ins, state.ins_opt), ("del", state.dele, state.del_opt)):
        names = [name for name, _ in params.named()]
        table += [(f"{prefix}/{name}", t.data) for name, t in params.named()]
        table += [(f"{prefix}_adam_m/{name}", m) for name, m in zip(names, opt.m)]
        table += [(f"{prefix}_adam_v/{name}", v) for name, v in zip(names, opt.v)]
    return table


def _header(model_config: ModelConfig, train_config: TrainConfig, state: TrainState) -> dict:
    return {
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
        "step": state.step,
        "rng": {"seed": state.seed, "stream": "per-step", "next_step": state.step},
        "adam": {"ins": state.ins_opt.step, "del": state.del_opt.step},
        "out_dims": {"ins": state.ins.out_dim, "del": state.dele.out_dim},
        "window": state.window,
    }


def checkpoint_bytes(model_config: ModelConfig, train_config: TrainConfig, state: TrainState) -> bytes:
    header = json.dumps(_header(model_config, train_config, state), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    table = _tensor_table(state)
    parts.append(struct.pack("<I", len(table)))
    for name, arr in table:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, model_config: ModelConfig, train_config: TrainConfig,
                    state: TrainState) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(model_config, train_config, state))
    os.replace(tmp, path)


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelConfig, TrainConfig, TrainState]:
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not an IDT1 checkpoint")
        version, header_len = struct.unpack("<II", _read(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        header = json.loads(_read(fh, header_len).decode())
        (count,) = struct.unpack("<I", _read(fh, 4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, name_len).decode()
            (rank,) = struct.unpack("<B", _read(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
            size = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(_read(fh, 4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor table")

    model_config = ModelConfig(**header["model"])
    train_config = TrainConfig(**header["train"])

    def restore(prefix: str, out_dim: int, opt_step: int):
        names = [n.split("/", 1)[1] for n in tensors if n.startswith(prefix + "/")]
        params = DecoderParams({n: Tensor(tensors[f"{prefix}/{n}"].copy(), requires_grad=True, name=n)
                                for n in names}, out_dim)
        opt = AdamState(**train_config.adam_hyper(), step=opt_step,
                        m=[tensors[f"{prefix}_adam_m/{n}"].copy() for n in names],
                        v=[tensors[f"{prefix}_adam_v/{n}"].copy() for n in names])
        return params, opt

    ins, ins_opt = restore("ins", header["out_dims"]["ins"], header["adam"]["ins"])
    dele, del_opt = restore("del", header["out_dims"]["del"], header["adam"]["del"])
    state = TrainState(ins, dele, ins_opt, del_opt, seed=header["rng"]["seed"], step=header["step"],
                       window=header["window"])
    return model_config, train_config, state
