"""Binary checkpoint container for trained models.

Layout: magic "MGCF", version u32, meta length u32, JSON metadata
(module kind, objective/quantizer/flow tags, architecture), then an
array count followed by per-array records: name length u32, name bytes,
ndim u32, dims u32 each, little-endian f64 data.  EMA shadows are
stored alongside the live weights under an "ema." prefix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np
import torch

from .errors import InvalidConfigError
from .flow import FlowConfig, FlowModel, UNetRegressor
from .frontend import FrontendModel, QuantizerSpec
from .nn import DTYPE, UNetConfig, VectorFieldUNet

CHECKPOINT_MAGIC = b"MGCF"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            shape = arr.shape  # before ascontiguousarray, which promotes 0-dim
            arr = np.ascontiguousarray(arr)
            name_b = name.encode()
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(arr.tobytes())


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise InvalidConfigError(f"{path}: not a checkpoint file")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise InvalidConfigError(f"unsupported checkpoint version {version}")
        meta_len, = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode())
        n_arrays, = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n_arrays):
            name_len, = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode()
            ndim, = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = (np.frombuffer(f.read(count * 8), dtype="<f8")
                            .reshape(shape).copy())
    return meta, arrays


def _state_arrays(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict, prefix: str) -> None:
    state = {k[len(prefix):]: torch.as_tensor(v, dtype=DTYPE)
             for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def _quantizer_meta(spec: QuantizerSpec) -> dict:
    return {"kind": spec.kind, "bits_per_latent": spec.bits_per_latent, "mu": spec.mu}


def _unet_meta(cfg: UNetConfig) -> dict:
    d = asdict(cfg)
    d["channel_mult"] = list(cfg.channel_mult) if cfg.channel_mult else None
    return d


def _unet_from_meta(d: dict) -> UNetConfig:
    d = dict(d)
    if d.get("channel_mult"):
        d["channel_mult"] = tuple(d["channel_mult"])
    return UNetConfig(**d)


def save_frontend(path, model: FrontendModel) -> None:
    meta = {
        "module": "frontend",
        "objective": model.objective,
        "n_antennas": model.n_antennas,
        "latent_dim": model.latent_dim,
        "quantizer": _quantizer_meta(model.spec),
    }
    arrays = _state_arrays(model.net, "net.")
    arrays.update(_state_arrays(model.quantizer, "quantizer."))
    write_checkpoint(path, meta, arrays)


def load_frontend(path) -> FrontendModel:
    meta, arrays = read_checkpoint(path)
    if meta.get("module") != "frontend":
        raise InvalidConfigError(f"{path}: expected a front-end checkpoint")
    q = meta["quantizer"]
    spec = QuantizerSpec(kind=q["kind"], bits_per_latent=q["bits_per_latent"], mu=q["mu"])
    model = FrontendModel(meta["n_antennas"], meta["latent_dim"], spec,
                          objective=meta["objective"])
    _load_state(model.net, arrays, "net.")
    _load_state(model.quantizer, arrays, "quantizer.")
    return model


def save_flow(path, model: FlowModel) -> None:
    meta = {
        "module": "flow_field",
        "flow": {"mode": model.config.mode, "sigma0": model.config.sigma0,
                 "n_step": model.config.n_step,
                 "use_ema_for_inference": model.config.use_ema_for_inference,
                 "cond_mode": model.config.cond_mode},
        "ema_decay": model.ema.decay,
        "unet": _unet_meta(model.field.cfg),
        "frontend_ref": model.frontend_ref,
    }
    arrays = _state_arrays(model.field, "field.")
    arrays.update({"ema." + k: v.numpy() for k, v in model.ema.shadow.items()})
    write_checkpoint(path, meta, arrays)


def load_flow(path) -> FlowModel:
    meta, arrays = read_checkpoint(path)
    if meta.get("module") != "flow_field":
        raise InvalidConfigError(f"{path}: expected a flow-field checkpoint")
    field = VectorFieldUNet(_unet_from_meta(meta["unet"]))
    _load_state(field, arrays, "field.")
    fc = meta["flow"]
    model = FlowModel(field, FlowConfig(**fc), ema_decay=meta["ema_decay"],
                      frontend_ref=meta.get("frontend_ref", ""))
    for k in model.ema.shadow:
        model.ema.shadow[k] = torch.as_tensor(arrays["ema." + k], dtype=DTYPE)
    return model


def save_regressor(path, reg: UNetRegressor) -> None:
    meta = {
        "module": "unet_regressor",
        "cond_mode": reg.cond_mode,
        "unet": _unet_meta(reg.field.cfg),
    }
    write_checkpoint(path, meta, _state_arrays(reg.field, "field."))


def load_regressor(path) -> UNetRegressor:
    meta, arrays = read_checkpoint(path)
    if meta.get("module") != "unet_regressor":
        raise InvalidConfigError(f"{path}: expected a regressor checkpoint")
    field = VectorFieldUNet(_unet_from_meta(meta["unet"]))
    _load_state(field, arrays, "field.")
    return UNetRegressor(field, meta["cond_mode"])
