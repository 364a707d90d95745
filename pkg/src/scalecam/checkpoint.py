"""Binary checkpoints.

Layout (all integers little-endian u64)::

    b"GSCK1\\n"
    len, architecture plan text (utf-8, the scaling text format)
    len, metadata text (utf-8 ``key = value`` lines, incl. tensor names)
    count
    count tensors in the tensor serialization format, in layer order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layers import Network
from .scaling import build_network, format_plan, parse_key_values, parse_plan
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"GSCK1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    plan_text: str
    state: list[tuple[str, np.ndarray]]
    epoch: int = 0
    val_accuracy: float = float("nan")
    rng_state: str = ""

    @classmethod
    def from_network(cls, network: Network, epoch: int = 0, val_accuracy: float = float("nan"), rng_state: str = ""):
        state = [(name, np.array(arr)) for name, arr in network.state()]
        plan_text = format_plan(network.plan) if network.plan is not None else ""
        return cls(plan_text, state, epoch, val_accuracy, rng_state)

    def to_network(self) -> Network:
        if not self.plan_text:
            raise CheckpointError("checkpoint carries no architecture plan")
        net = build_network(parse_plan(self.plan_text), seed=0)
        net.load_state(self.state)
        return net

    def load_into(self, network: Network) -> Network:
        network.load_state(self.state)
        return network


def _meta_text(ckpt: Checkpoint) -> str:
    return "\n".join(
        [
            f"epoch = {ckpt.epoch}",
            f"val_accuracy = {ckpt.val_accuracy!r}",
            f"rng_state = {ckpt.rng_state}",
            f"tensors = {','.join(name for name, _ in ckpt.state)}",
        ]
    ) + "\n"


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    plan = ckpt.plan_text.encode("utf-8")
    meta = _meta_text(ckpt).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(plan)), plan, struct.pack("<Q", len(meta)), meta]
    parts.append(struct.pack("<Q", len(ckpt.state)))
    parts += [tensor_to_bytes(arr) for _, arr in ckpt.state]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _read_block(buf: bytes, pos: int, what: str) -> tuple[bytes, int]:
    if pos + 8 > len(buf):
        raise CheckpointError(f"truncated checkpoint: missing {what} length at byte {pos}")
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if pos + n > len(buf):
        raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at byte {pos}, have {len(buf) - pos}")
    return buf[pos : pos + n], pos + n


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic at byte 0: {bytes(buf[:len(MAGIC)])!r}")
    pos = len(MAGIC)
    plan, pos = _read_block(buf, pos, "plan text")
    meta_raw, pos = _read_block(buf, pos, "metadata")
    meta, _ = parse_key_values(meta_raw.decode("utf-8"))
    if pos + 8 > len(buf):
        raise CheckpointError(f"truncated checkpoint: missing tensor count at byte {pos}")
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    names = [n for n in meta.get("tensors", "").split(",") if n]
    if len(names) != count:
        raise CheckpointError(f"metadata lists {len(names)} tensors but header says {count}")
    state = []
    for name in names:
        try:
            t, pos = tensor_from_bytes(buf, pos)
        except ValueError as exc:
            raise CheckpointError(f"tensor {name}: {exc}") from None
        state.append((name, np.array(t.data)))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor at byte {pos}")
    return Checkpoint(
        plan.decode("utf-8"),
        state,
        int(meta.get("epoch", 0)),
        float(meta.get("val_accuracy", "nan")),
        meta.get("rng_state", ""),
    )


def load_checkpoint(path, network: Network | None = None) -> Checkpoint:
    """Read a checkpoint; if ``network`` is given, load its state into it."""
    ckpt = parse_checkpoint(Path(path).read_bytes())
    if network is not None:
        ckpt.load_into(network)
    return ckpt
