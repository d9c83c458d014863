"""Versioned, checksummed checkpoint files holding named arrays.

Layout::

    MAGIC (8 bytes) | header length (u64 LE) | JSON header | array bytes | sha256 (32 bytes)

The header is JSON with sorted keys and lists every array as
``(name, dtype, shape, offset, nbytes)`` relative to the array block. The
digest covers every byte before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ExposureNet, ModelConfig

MAGIC = b"EXSHCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointCorrupt(CheckpointError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, torch.Tensor]
    iteration: int = 0
    optimizer_state: dict | None = None
    rng_state: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def build_model(self) -> ExposureNet:
        model = ExposureNet(self.model_config)
        model.load_state_dict(self.params)
        return model.eval()


def _flatten_optimizer(state: dict, arrays: dict[str, np.ndarray]) -> dict:
    meta = {"param_groups": state["param_groups"], "state": {}}
    for idx in sorted(state["state"]):
        entry = {}
        for key in sorted(state["state"][idx]):
            v = state["state"][idx][key]
            if isinstance(v, torch.Tensor):
                name = f"optim.{idx}.{key}"
                arrays[name] = v.detach().cpu().numpy()
                entry[key] = {"array": name}
            else:
                entry[key] = {"value": v}
        meta["state"][str(idx)] = entry
    return meta


def _unflatten_optimizer(meta: dict, arrays: dict[str, np.ndarray]) -> dict:
    state = {}
    for idx, entry in meta["state"].items():
        state[int(idx)] = {
            k: torch.from_numpy(arrays[v["array"]].copy()) if "array" in v else v["value"] for k, v in entry.items()
        }
    return {"state": state, "param_groups": meta["param_groups"]}


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    for name, t in ckpt.params.items():
        arrays[f"param.{name}"] = t.detach().cpu().contiguous().numpy()
    optim_meta = _flatten_optimizer(ckpt.optimizer_state, arrays) if ckpt.optimizer_state else None
    rng_meta = {}
    for key, value in ckpt.rng_state.items():
        if isinstance(value, torch.Tensor):
            arrays[f"rng.{key}"] = value.numpy()
            rng_meta[key] = {"array": f"rng.{key}"}
        else:
            rng_meta[key] = {"value": value}

    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "model_config": asdict(ckpt.model_config),
        "config_digest": ckpt.model_config.digest(),
        "iteration": ckpt.iteration,
        "arrays": index,
        "optimizer": optim_meta,
        "rng": rng_meta,
        "train_config": ckpt.train_config,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 + 32 or not data.startswith(MAGIC):
        raise CheckpointCorrupt("not a checkpoint file (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorrupt("checksum mismatch: file is truncated or corrupt")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16:16 + hlen])
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {header['format_version']} != supported {FORMAT_VERSION}")
    try:
        cfg = ModelConfig(**header["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint carries an unusable model config: {exc}") from exc
    if expected_config is not None and expected_config.digest() != header["config_digest"]:
        raise CheckpointMismatch(
            f"model config mismatch: checkpoint {header['config_digest']} vs expected {expected_config.digest()}"
        )
    block = body[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = block[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    params = {k[len("param."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")}
    rng = {
        k: torch.from_numpy(arrays[v["array"]]) if "array" in v else v["value"] for k, v in header["rng"].items()
    }
    optim = _unflatten_optimizer(header["optimizer"], arrays) if header["optimizer"] else None
    return Checkpoint(
        model_config=cfg,
        params=params,
        iteration=header["iteration"],
        optimizer_state=optim,
        rng_state=rng,
        train_config=header["train_config"],
        format_version=header["format_version"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes(), expected_config)


def snapshot(model: ExposureNet, optimizer=None, iteration: int = 0, rng_state=None, train_config=None) -> Checkpoint:
    return Checkpoint(
        model_config=model.cfg,
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        iteration=iteration,
        optimizer_state=optimizer.state_dict() if optimizer is not None else None,
        rng_state=rng_state or {},
        train_config=train_config or {},
    )
