"""The full multi-resolution model and its checkpoint file format."""
from __future__ import annotations

import os
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import DataFormatError, SlideDataset
from .encoders import EncoderConfig, GlobalEncoder, GridCoordinates, NeighborEncoder, TargetEncoder
from .fusion import FusionLayer, FusionOutput, PredictionHeads
from .nn import Module
from .tensor import Tensor, no_grad

CKPT_MAGIC = b"TPLXCKPT"
CKPT_VERSION = 1
_CHOICES = {
    "target_activation": ("gelu", "relu", "none"),
    "target_mode": ("features", "image"),
}


class CheckpointError(ValueError):
    pass


class TriplexModel(Module):
    def __init__(self, cfg: EncoderConfig, m: int, seed: int = 0):
        if m < 1:
            raise ValueError("m must be >= 1")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.m = m
        self.target_encoder = TargetEncoder(cfg, rng)
        self.neighbor_encoder = NeighborEncoder(cfg, rng)
        self.global_encoder = GlobalEncoder(cfg, rng)
        self.fusion = FusionLayer(cfg.d, cfg.depth1, cfg.num_heads1, cfg.mlp_ratio1, cfg.dropout1, rng)
        self.heads = PredictionHeads(cfg.d, m, rng)

    @property
    def dtype(self):
        return self.heads.fusion.weight.dtype

    def encode_global(self, global_features: np.ndarray, coords) -> Tensor:
        if not isinstance(coords, GridCoordinates):
            coords = GridCoordinates(coords)
        return self.global_encoder(Tensor(np.asarray(global_features, dtype=self.dtype)), coords)

    def forward(self, target_in, neighbor_in, z_gl: Tensor) -> FusionOutput:
        """Predict for a batch of spots given their rows of the global tokens."""
        t = target_in if isinstance(target_in, Tensor) else Tensor(np.asarray(target_in, dtype=self.dtype))
        nb = neighbor_in if isinstance(neighbor_in, Tensor) else Tensor(np.asarray(neighbor_in, dtype=self.dtype))
        z_ta = self.target_encoder(t)
        z_ne = self.neighbor_encoder(nb)
        out = self.fusion(z_gl, z_ta, z_ne)
        out.q_ta, out.q_ne, out.q_gl, out.q_f = self.heads(z_ta, z_ne, z_gl, out.z_gtn)
        return out

    def target_input(self, ds: SlideDataset, rows) -> np.ndarray:
        if self.cfg.target_mode == "image":
            if ds.target_images is None:
                raise DataFormatError(f"slide {ds.slide_id!r} has no target images for image mode")
            return ds.target_images[rows]
        return ds.features.target[rows]

    def predict_slide(self, ds: SlideDataset, batch: int = 256) -> np.ndarray:
        """Fusion-head predictions for every spot of a slide, shape (n, m)."""
        if ds.features is None:
            raise DataFormatError(f"slide {ds.slide_id!r} has no features")
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                z_gl = self.encode_global(ds.features.global_, ds.grid)
                preds = []
                for start in range(0, ds.n, batch):
                    rows = np.arange(start, min(start + batch, ds.n))
                    out = self.forward(self.target_input(ds, rows), ds.features.neighbor[rows], z_gl.take(rows))
                    preds.append(out.q_f.data)
        finally:
            if was_training:
                self.train(True, self._rng)
        return np.concatenate(preds).astype(np.float64)


# ----------------------------------------------------------------------
# checkpoint files


def _meta_arrays(model: TriplexModel) -> dict[str, np.ndarray]:
    meta = {"meta.m": model.m}
    for key, value in asdict(model.cfg).items():
        if key in _CHOICES:
            value = _CHOICES[key].index(value)
        meta[f"meta.{key}"] = float(value)
    return {k: np.array([v], dtype=np.float32) for k, v in meta.items()}


def save_checkpoint(path, model: TriplexModel) -> None:
    """Write model config and weights: magic, version, count, then named f32 arrays."""
    arrays = {**_meta_arrays(model), **model.state_dict()}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def read_checkpoint_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a TPLXCKPT checkpoint")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return arrays


def load_checkpoint(path) -> TriplexModel:
    arrays = read_checkpoint_arrays(path)
    meta = {k[5:]: float(v[0]) for k, v in arrays.items() if k.startswith("meta.")}
    cfg_values = {}
    for f in fields(EncoderConfig):
        if f.name not in meta:
            raise CheckpointError(f"{path}: missing config entry {f.name!r}")
        raw = meta[f.name]
        if f.name in _CHOICES:
            cfg_values[f.name] = _CHOICES[f.name][int(raw)]
        elif f.type in ("int", int):
            cfg_values[f.name] = int(raw)
        elif f.type in ("bool", bool):
            cfg_values[f.name] = bool(raw)
        else:
            cfg_values[f.name] = float(f"{raw:.7g}")
    model = TriplexModel(EncoderConfig(**cfg_values), int(meta["m"]))
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("meta.")})
    return model
