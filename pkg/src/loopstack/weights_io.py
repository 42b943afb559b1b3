"""Binary weight files: magic "TFLT", version, JSON directory, raw f32, CRC-32.

Layout (all integers little-endian):

    bytes 0..3   magic b"TFLT"
    u32          format version (currently 1)
    u32          header length in bytes
    header       UTF-8 JSON: {"config": {...}, "tensors": [
                     {"name": str, "shape": [int...], "offset": int}, ...]}
    payload      raw float32 tensor data, offsets relative to payload start
    u32          CRC-32 of the payload bytes

Tensor order in the directory is canonical (embed, per-layer weights in
layer order, final norm, head) and the round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import WeightFormatError
from .model import (ExpertWeights, LayerWeights, Model, ModelConfig,
                    MoEConfig, MoEWeights)

MAGIC = b"TFLT"
VERSION = 1
_F4 = np.dtype("<f4")


def _tensor_items(model: Model):
    """Yield (name, array) in canonical order."""
    yield "embed.weight", model.embed
    for i, lw in enumerate(model.layers):
        p = f"layers.{i}"
        yield f"{p}.norm1.gain", lw.norm1_gain
        yield f"{p}.attn.wq", lw.wq
        yield f"{p}.attn.wk", lw.wk
        yield f"{p}.attn.wv", lw.wv
        yield f"{p}.attn.wo", lw.wo
        yield f"{p}.norm2.gain", lw.norm2_gain
        if lw.is_moe:
            yield f"{p}.moe.gate", lw.moe.gate
            for e, ew in enumerate(lw.moe.experts):
                q = f"{p}.moe.experts.{e}"
                yield f"{q}.w_gate", ew.w_gate
                yield f"{q}.w_up", ew.w_up
                yield f"{q}.w_down", ew.w_down
        else:
            yield f"{p}.mlp.w_gate", lw.w_gate
            yield f"{p}.mlp.w_up", lw.w_up
            yield f"{p}.mlp.w_down", lw.w_down
    yield "final_norm.gain", model.final_norm_gain
    yield "head.weight", model.head


def config_to_dict(config: ModelConfig) -> dict:
    d = {
        "n_layers": config.n_layers, "d_model": config.d_model,
        "n_heads": config.n_heads, "head_dim": config.head_dim,
        "ffn_hidden": config.ffn_hidden, "vocab_size": config.vocab_size,
        "rope_base": config.rope_base, "norm_eps": config.norm_eps,
        "moe": None, "moe_layer_indices": list(config.moe_layer_indices),
    }
    if config.moe is not None:
        d["moe"] = {"n_experts": config.moe.n_experts, "top_k": config.moe.top_k,
                    "expert_hidden": config.moe.expert_hidden}
    return d


def config_from_dict(d: dict) -> ModelConfig:
    known = {"n_layers", "d_model", "n_heads", "head_dim", "ffn_hidden",
             "vocab_size", "rope_base", "norm_eps", "moe", "moe_layer_indices"}
    unknown = set(d) - known
    if unknown:
        raise WeightFormatError(f"unknown config keys: {sorted(unknown)}")
    required = {"n_layers", "d_model", "n_heads", "head_dim", "ffn_hidden", "vocab_size"}
    missing = required - set(d)
    if missing:
        raise WeightFormatError(f"missing config keys: {sorted(missing)}")
    moe = d.get("moe")
    if moe is not None:
        if set(moe) != {"n_experts", "top_k", "expert_hidden"}:
            raise WeightFormatError("malformed moe config")
        moe = MoEConfig(**moe)
    try:
        return ModelConfig(
            n_layers=d["n_layers"], d_model=d["d_model"], n_heads=d["n_heads"],
            head_dim=d["head_dim"], ffn_hidden=d["ffn_hidden"],
            vocab_size=d["vocab_size"], rope_base=d.get("rope_base", 10000.0),
            norm_eps=d.get("norm_eps", 1e-6), moe=moe,
            moe_layer_indices=tuple(d.get("moe_layer_indices", ())),
        )
    except ValueError as exc:
        raise WeightFormatError(f"invalid model config: {exc}") from exc


def save_weights(model: Model, path: str) -> None:
    directory = []
    chunks = []
    offset = 0
    for name, arr in _tensor_items(model):
        raw = np.ascontiguousarray(arr, dtype=_F4).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"config": config_to_dict(model.config),
                         "tensors": directory},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_weights(path: str) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise WeightFormatError("file truncated before header")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    header_end = 12 + header_len
    if len(blob) < header_end + 4:
        raise WeightFormatError("file truncated inside header")
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"malformed header JSON: {exc}") from exc
    if set(header) != {"config", "tensors"}:
        raise WeightFormatError("header must contain exactly config and tensors")
    config = config_from_dict(header["config"])

    payload = blob[header_end:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc_stored:
        raise WeightFormatError("checksum mismatch: payload corrupt")

    tensors = {}
    for entry in header["tensors"]:
        if set(entry) != {"name", "shape", "offset"}:
            raise WeightFormatError("malformed tensor directory entry")
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset < 0 or offset + nbytes > len(payload):
            raise WeightFormatError(f"truncated tensor {name}")
        arr = np.frombuffer(payload, dtype=_F4, count=nbytes // 4,
                            offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)  # own, native-order copy

    return _assemble(config, tensors)


def _assemble(config: ModelConfig, tensors: dict) -> Model:
    d, ffn, v = config.d_model, config.ffn_hidden, config.vocab_size

    def take(name, shape):
        if name not in tensors:
            raise WeightFormatError(f"missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != shape:
            raise WeightFormatError(
                f"tensor {name} has shape {arr.shape}, expected {shape}")
        return arr

    embed = take("embed.weight", (v, d))
    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}"
        lw = LayerWeights(
            norm1_gain=take(f"{p}.norm1.gain", (d,)),
            wq=take(f"{p}.attn.wq", (d, d)), wk=take(f"{p}.attn.wk", (d, d)),
            wv=take(f"{p}.attn.wv", (d, d)), wo=take(f"{p}.attn.wo", (d, d)),
            norm2_gain=take(f"{p}.norm2.gain", (d,)),
        )
        if i in config.moe_layer_indices:
            mc = config.moe
            lw.moe = MoEWeights(
                gate=take(f"{p}.moe.gate", (d, mc.n_experts)),
                experts=[ExpertWeights(
                    w_gate=take(f"{p}.moe.experts.{e}.w_gate", (d, mc.expert_hidden)),
                    w_up=take(f"{p}.moe.experts.{e}.w_up", (d, mc.expert_hidden)),
                    w_down=take(f"{p}.moe.experts.{e}.w_down", (mc.expert_hidden, d)))
                    for e in range(mc.n_experts)],
            )
        else:
            lw.w_gate = take(f"{p}.mlp.w_gate", (d, ffn))
            lw.w_up = take(f"{p}.mlp.w_up", (d, ffn))
            lw.w_down = take(f"{p}.mlp.w_down", (ffn, d))
        layers.append(lw)
    final_gain = take("final_norm.gain", (d,))
    head = take("head.weight", (d, v))
    if tensors:
        raise WeightFormatError(f"unexpected tensors: {sorted(tensors)}")
    return Model(config=config, embed=embed, layers=layers,
                 final_norm_gain=final_gain, head=head)
