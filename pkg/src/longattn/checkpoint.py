"""Binary checkpoint container.

Layout::

    uint64 LE  header length in bytes
    header     UTF-8 JSON (sorted keys, compact)
    payload    float32 LE arrays, concatenated in manifest order

The header carries the model config, a manifest of every stored array
(section, name, shape, byte offset, trainable flag), adapter settings,
optimizer hyper-parameters and a free-form ``state`` dict. Arrays are
stored at 32-bit precision, so a float64 model loses precision once on
its first save; after that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, ConfigError
from .lora import LoraAdapter
from .model import AdamW, DecoderModel, ModelConfig, parameter_shapes
from .tensor import Tensor

FORMAT = "longattn-checkpoint"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: DecoderModel
    optimizer: Optional[AdamW] = None
    state: dict = field(default_factory=dict)


def _arrays(model: DecoderModel, optimizer: Optional[AdamW]):
    for name, p in model.params.items():
        yield "model", name, p.data, p.requires_grad
    for name, ad in model.adapters.items():
        yield "lora", name + ".lora_A", ad.A.data, ad.A.requires_grad
        yield "lora", name + ".lora_B", ad.B.data, ad.B.requires_grad
    if optimizer is not None:
        for name in optimizer.m:
            yield "optimizer", name + ".m", optimizer.m[name], False
            yield "optimizer", name + ".v", optimizer.v[name], False


def to_bytes(model: DecoderModel, optimizer: Optional[AdamW] = None,
             state: Optional[dict] = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for section, name, data, trainable in _arrays(model, optimizer):
        raw = np.ascontiguousarray(data, dtype=_F32).tobytes()
        manifest.append({"section": section, "name": name, "shape": list(data.shape),
                         "offset": offset, "trainable": bool(trainable)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "manifest": manifest,
        "payload_bytes": offset,
        "lora": [{"name": name, "r": ad.r, "alpha": ad.alpha} for name, ad in model.adapters.items()],
        "merged": model.merged,
        "optimizer": None if optimizer is None else {
            "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay, "step_count": optimizer.step_count},
        "state": state or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(blob)) + blob + b"".join(chunks)


def save(path, model: DecoderModel, optimizer: Optional[AdamW] = None,
         state: Optional[dict] = None) -> None:
    Path(path).write_bytes(to_bytes(model, optimizer, state))


def _parse(raw: bytes) -> tuple[dict, memoryview]:
    if len(raw) < _LEN.size:
        raise CheckpointError("checkpoint is truncated (no header length)")
    (n,) = _LEN.unpack_from(raw)
    if len(raw) < _LEN.size + n:
        raise CheckpointError("checkpoint is truncated (header)")
    try:
        header = json.loads(raw[_LEN.size:_LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint header is not valid JSON: {e}") from None
    if header.get("format") != FORMAT:
        raise CheckpointError("not a longattn checkpoint")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = memoryview(raw)[_LEN.size + n:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload has {len(payload)} bytes, header says {header['payload_bytes']}")
    return header, payload


def _check_config(stored: ModelConfig, expected: Optional[ModelConfig]) -> None:
    if expected is None or stored == expected:
        return
    diffs = {k: (v, getattr(expected, k)) for k, v in stored.to_dict().items()
             if v != getattr(expected, k)}
    raise ConfigError(f"checkpoint config does not match: {diffs} (stored, expected)")


def from_bytes(raw: bytes, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    header, payload = _parse(raw)
    config = ModelConfig.from_dict(header["config"])
    _check_config(config, expected_config)
    arrays = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(f"{entry['name']}: payload too short")
        data = np.frombuffer(payload, dtype=_F32, count=count, offset=start)
        arrays[(entry["section"], entry["name"])] = (data.reshape(entry["shape"]).astype(np.float64),
                                                     entry["trainable"])

    shapes = parameter_shapes(config)
    params = {}
    for name, shape in shapes.items():
        if ("model", name) not in arrays:
            raise ConfigError(f"checkpoint is missing parameter {name}")
        data, trainable = arrays[("model", name)]
        if data.shape != shape:
            raise ConfigError(f"{name}: stored shape {data.shape} != config shape {shape}")
        params[name] = Tensor(data, requires_grad=trainable, name=name)
    model = DecoderModel(config, params)
    model.merged = bool(header.get("merged", False))
    for meta in header["lora"]:
        name = meta["name"]
        try:
            a, a_train = arrays[("lora", name + ".lora_A")]
            b, b_train = arrays[("lora", name + ".lora_B")]
        except KeyError:
            raise CheckpointError(f"adapter {name} has no stored weights") from None
        ad = LoraAdapter.__new__(LoraAdapter)
        ad.base, ad.r, ad.alpha = name, int(meta["r"]), float(meta["alpha"])
        ad.A = Tensor(a, requires_grad=a_train, name=name + ".lora_A")
        ad.B = Tensor(b, requires_grad=b_train, name=name + ".lora_B")
        model.adapters[name] = ad

    optimizer = None
    if header["optimizer"] is not None:
        opt = header["optimizer"]
        optimizer = AdamW(opt["beta1"], opt["beta2"], opt["eps"], opt["weight_decay"], opt["step_count"])
        for (section, name), (data, _) in arrays.items():
            if section == "optimizer":
                base, moment = name.rsplit(".", 1)
                getattr(optimizer, moment)[base] = data
    return Checkpoint(model, optimizer, header["state"])


def load(path, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return from_bytes(raw, expected_config)


def round_to_storage(model: DecoderModel, optimizer: Optional[AdamW] = None) -> None:
    """Round live state to checkpoint precision so a resumed run replays exactly."""
    for _, _, data, _ in _arrays(model, optimizer):
        data[...] = data.astype(_F32)
