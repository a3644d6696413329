"""Checkpoint directories: ``manifest.json`` + ``params.bin`` (little-endian float32)."""

from dataclasses import dataclass, field
import hashlib
import json
import os

import numpy as np

from .model import DomainTransferParams, NetworkSpec, build_network
from .training import OptimizerState

MODEL_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.bin"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    networks: dict
    transfer: DomainTransferParams = field(default_factory=DomainTransferParams)
    optimizer: OptimizerState = None
    progress: dict = field(default_factory=dict)


def _opt_tensor_names(opt):
    return sorted(opt.m)


def save_checkpoint(path, ckpt):
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    offset = 0

    def put(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "byte_offset": offset,
                        "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for net in sorted(ckpt.networks):
        for key, arr in ckpt.networks[net].named_arrays():
            put(f"{net}/{key}", arr)
    opt_meta = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        for name in _opt_tensor_names(opt):
            put(f"opt.m/{name}", opt.m[name])
            put(f"opt.v/{name}", opt.v[name])
        opt_meta = {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                    "clip_norm": opt.clip_norm, "t": opt.t,
                    "updates": {k: opt.updates[k] for k in sorted(opt.updates)}}
    payload = b"".join(chunks)
    t = ckpt.transfer
    manifest = {
        "model_version": MODEL_VERSION,
        "networks": {net: ckpt.networks[net].spec.to_dict() for net in sorted(ckpt.networks)},
        "transfer": {"alpha": t.alpha, "gamma": t.gamma, "delta": t.delta, "s_max": t.s_max},
        "optimizer": opt_meta,
        "progress": ckpt.progress,
        "params_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": entries,
    }
    with open(os.path.join(path, PARAMS), "wb") as f:
        f.write(payload)
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def load_checkpoint(path):
    """Load and verify a checkpoint; any corruption raises ``CheckpointError``."""
    try:
        with open(os.path.join(path, MANIFEST)) as f:
            manifest = json.load(f)
        with open(os.path.join(path, PARAMS), "rb") as f:
            payload = f.read()
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from None
    if manifest.get("model_version") != MODEL_VERSION:
        raise CheckpointError(f"{path}: unsupported model_version {manifest.get('model_version')!r}")
    if hashlib.sha256(payload).hexdigest() != manifest.get("params_sha256"):
        raise CheckpointError(f"{path}: integrity check failed, params.bin does not match manifest")

    arrays = {}
    for e in manifest["tensors"]:
        start, n = e["byte_offset"], e["byte_len"]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if n != 4 * count or start + n > len(payload):
            raise CheckpointError(f"{path}: integrity check failed for tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(e["shape"])

    networks = {}
    for net, spec_dict in manifest["networks"].items():
        try:
            spec = NetworkSpec.from_dict(spec_dict)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: bad network spec for {net}: {e}") from None
        params = build_network(spec, seed=0, sigma=0.0)
        wanted = dict(params.named_arrays())
        mine = {}
        for key, arr in wanted.items():
            name = f"{net}/{key}"
            if name not in arrays:
                raise CheckpointError(f"{path}: layer {key.split('.')[0]} of {net} is missing {key}")
            if tuple(arrays[name].shape) != arr.shape:
                raise CheckpointError(
                    f"{path}: layer {key.split('.')[0]} of {net}: {key} has shape "
                    f"{tuple(arrays[name].shape)}, spec expects {arr.shape}"
                )
            mine[key] = arrays[name]
        params.load_arrays(mine)
        networks[net] = params

    optimizer = None
    meta = manifest.get("optimizer")
    if meta is not None:
        optimizer = OptimizerState(meta["beta1"], meta["beta2"], meta["eps"], meta["clip_norm"], meta["t"])
        optimizer.updates = dict(meta["updates"])
        for name, arr in arrays.items():
            kind, _, pname = name.partition("/")
            if kind in ("opt.m", "opt.v"):
                target = optimizer.m if kind == "opt.m" else optimizer.v
                target[pname] = arr.astype(np.float32)
    tr = manifest.get("transfer") or {}
    transfer = DomainTransferParams(**tr) if tr else DomainTransferParams()
    return Checkpoint(networks, transfer, optimizer, manifest.get("progress") or {})
