"""DPCK checkpoint container and (de)serialization of backbones and patches.

Layout, little-endian throughout::

    b"DPCK"  u16 version=1  u32 tensor_count
    per tensor: u16 name_len, utf-8 name, u8 rank, rank x u32 dims, prod(dims) x f32
    u32 metadata_len, utf-8 metadata (JSON)
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .delta import BlockPatch, PatchState, SkipNorm, make_delta_module
from .init import make_rng
from .nets import Backbone, HeadSpec, build_backbone
from .tensor import Tensor

MAGIC = b"DPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict


def encode_checkpoint(tables: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tables))]
    for name, arr in tables.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 + 2 + 4 + 4 + 4:
        raise CheckpointError(f"file too short ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at byte 0")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at byte 4")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC-32 mismatch: file is corrupted")
    body = memoryview(buf)[:-4]
    pos = 6

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"truncated at byte {pos} (need {n} more)")
        chunk = bytes(body[pos:pos + n])
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    (mlen,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(mlen).decode("utf-8")) if mlen else {}
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} unexpected bytes at offset {pos}")
    return Checkpoint(tensors, metadata)


def save_checkpoint(path, tables: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tables, metadata))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# -- model <-> table ---------------------------------------------------------------------------

def backbone_metadata(bb: Backbone, **extra) -> dict:
    return {
        "kind": "backbone",
        "arch_preset": bb.preset,
        "input_shape": list(bb.input_shape),
        "widths": [blk.out_channels for blk in bb.blocks],
        "depths": [blk.k for blk in bb.blocks],
        "base_classes": bb.head.classes,
        "frozen": bb.frozen,
        **extra,
    }


def save_backbone(path, bb: Backbone, **extra) -> None:
    save_checkpoint(path, bb.named_tensors(), backbone_metadata(bb, **extra))


def backbone_from_checkpoint(ck: Checkpoint) -> Backbone:
    m = ck.metadata
    if m.get("kind") != "backbone":
        raise CheckpointError("checkpoint does not hold a backbone")
    bb = build_backbone(m["arch_preset"], tuple(m["input_shape"]), m["base_classes"], make_rng(0),
                        widths=m["widths"], depths=m["depths"])
    for name, t in bb.params.items():
        t.data = ck.tensors[name].copy()
    for name in bb.buffers:
        bb.buffers[name] = ck.tensors[name].copy()
    bb.head.weight.data = ck.tensors["head.weight"].copy()
    bb.head.bias.data = ck.tensors["head.bias"].copy()
    if m.get("frozen"):
        bb.freeze()
    return bb


def load_backbone(path) -> Backbone:
    return backbone_from_checkpoint(load_checkpoint(path))


def patch_tables(patch: PatchState) -> tuple[dict[str, np.ndarray], dict]:
    tables = {"head.weight": patch.head.weight.data, "head.bias": patch.head.bias.data}
    blocks = []
    for b, bp in sorted(patch.blocks.items()):
        entry = {"block": b, "source": bp.source, "connections": bp.connections,
                 "skip_norm_targets": sorted(bp.skip_norms)}
        if bp.module is not None:
            entry["in_channels"] = bp.module.in_channels
            for k, t in bp.module.params.items():
                tables[f"b{b}.delta.{k}"] = t.data
            for k, v in bp.module.buffers.items():
                tables[f"b{b}.delta.{k}"] = v
        if bp.weights is not None:
            tables[f"b{b}.weights"] = bp.weights.data
        for t, norm in bp.skip_norms.items():
            tables[f"b{b}.skipnorm{t}.gamma"] = norm.gamma.data
            tables[f"b{b}.skipnorm{t}.beta"] = norm.beta.data
            tables[f"b{b}.skipnorm{t}.mean"] = norm.mean
            tables[f"b{b}.skipnorm{t}.var"] = norm.var
        blocks.append(entry)
    meta = {"kind": "patch", "task_id": patch.task_id, "variant": patch.variant, "seed": patch.seed,
            "classes": patch.head.classes, "feature_width": patch.head.in_features, "blocks": blocks}
    return tables, meta


def save_patch(path, patch: PatchState, **extra) -> None:
    tables, meta = patch_tables(patch)
    meta.update(extra)
    save_checkpoint(path, tables, meta)


def patch_from_checkpoint(ck: Checkpoint) -> PatchState:
    m = ck.metadata
    if m.get("kind") != "patch":
        raise CheckpointError("checkpoint does not hold a patch")
    t = ck.tensors
    head = HeadSpec(m["feature_width"], m["classes"], Tensor(t["head.weight"].copy(), requires_grad=True),
                    Tensor(t["head.bias"].copy(), requires_grad=True))
    patch = PatchState(m["task_id"], head, variant=m["variant"], seed=m.get("seed", 0))
    if m["variant"].startswith("random"):
        patch.rng = make_rng(patch.seed, 7)
    for e in m["blocks"]:
        b = e["block"]
        bp = BlockPatch(b, list(e["connections"]), e["source"])
        if "in_channels" in e:
            mod = make_delta_module(e["in_channels"], len(bp.connections), make_rng(0))
            for k in mod.params:
                mod.params[k].data = t[f"b{b}.delta.{k}"].copy()
            for k in mod.buffers:
                mod.buffers[k] = t[f"b{b}.delta.{k}"].copy()
            bp.module = mod
        if f"b{b}.weights" in t:
            bp.weights = Tensor(t[f"b{b}.weights"].copy(), requires_grad=e["source"] == "learned")
        for tgt in e["skip_norm_targets"]:
            bp.skip_norms[tgt] = SkipNorm(Tensor(t[f"b{b}.skipnorm{tgt}.gamma"].copy(), requires_grad=True),
                                          Tensor(t[f"b{b}.skipnorm{tgt}.beta"].copy(), requires_grad=True),
                                          t[f"b{b}.skipnorm{tgt}.mean"].copy(), t[f"b{b}.skipnorm{tgt}.var"].copy())
        patch.blocks[b] = bp
    return patch


def load_patch(path) -> PatchState:
    return patch_from_checkpoint(load_checkpoint(path))
