"""The cascade of CNN subnetworks interleaved with data-consistency layers."""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .kspace import SamplingMask, from_channels, to_channels, zero_filled
from .layers import DS_WINDOWS, CnnBlock, cnn_forward, dc_apply, ds_apply
from .tensor import ShapeError, Tensor

__all__ = [
    "CascadeConfig",
    "CascadeModel",
    "ModelFormatError",
    "build",
    "forward",
    "reconstruct",
    "count_params",
    "formula_param_count",
    "estimate_memory",
    "grow_cascade",
    "parse_arch",
    "save_model",
    "load_model",
]

MAGIC = b"KCSD1"
VERSION = 1


class ModelFormatError(ValueError):
    """Malformed or unsupported model file."""


@dataclass(frozen=True)
class CascadeConfig:
    """Architecture of a cascade network.

    ``dc_mode="hard"`` gives exact replacement of acquired k-space; with
    ``"soft"`` each DC layer blends with its own ``lam`` (trainable if
    ``train_lambda``).
    """

    n_d: int = 5
    n_c: int = 5
    n_f: int = 64
    kernel_size: int = 3
    dynamic: bool = True
    data_sharing: bool = False
    dc_mode: str = "hard"
    lam: float = 0.025
    train_lambda: bool = False
    ds_boundary: str = "clamp"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.n_c < 1 or self.n_d < 2 or self.n_f < 1:
            raise ValueError(f"invalid architecture n_d={self.n_d}, n_c={self.n_c}, n_f={self.n_f}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.data_sharing and not self.dynamic:
            raise ValueError("data sharing requires dynamic (3D) mode")
        if self.dc_mode not in ("hard", "soft"):
            raise ValueError(f"dc_mode must be 'hard' or 'soft', got {self.dc_mode!r}")
        if self.train_lambda and self.dc_mode != "soft":
            raise ValueError("train_lambda requires dc_mode='soft'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def kernel(self) -> tuple:
        k = self.kernel_size
        return (k, k, k if self.dynamic else 1)

    @property
    def name(self) -> str:
        return f"D{self.n_d}-C{self.n_c}" + ("(S)" if self.data_sharing else "")

    def block(self) -> CnnBlock:
        in_ch = 2 * len(DS_WINDOWS) if self.data_sharing else 2
        return CnnBlock(self.n_d, self.n_f, self.kernel, in_ch)


_ARCH = re.compile(r"^D(\d+)-C(\d+)(\(S\))?$")


def parse_arch(name: str) -> dict:
    """``"D5-C10(S)"`` -> ``{"n_d": 5, "n_c": 10, "data_sharing": True}``."""
    m = _ARCH.match(name.strip())
    if not m:
        raise ValueError(f"architecture must look like 'D5-C5' or 'D5-C10(S)', got {name!r}")
    return {"n_d": int(m.group(1)), "n_c": int(m.group(2)), "data_sharing": bool(m.group(3))}


@dataclass
class CascadeModel:
    """Configuration plus parameters, stored in a fixed, deterministic order.

    Parameter names are ``c{i}.w{j}``, ``c{i}.b{j}`` for the convolutions of
    subnetwork ``i`` and ``c{i}.lam`` for its DC layer.
    """

    config: CascadeConfig
    params: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def n_c(self) -> int:
        return self.config.n_c

    def param_names(self) -> list:
        names = []
        for i in range(self.config.n_c):
            for j in range(self.config.n_d):
                names += [f"c{i}.w{j}", f"c{i}.b{j}"]
            names.append(f"c{i}.lam")
        return names

    def trainable(self, name: str) -> bool:
        return not name.endswith(".lam") or self.config.train_lambda

    def copy(self) -> "CascadeModel":
        return CascadeModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def __repr__(self):
        return f"CascadeModel({self.name}, params={count_params(self)})"


def _he_subnet(cfg: CascadeConfig, i: int, rng: np.random.Generator) -> dict:
    dtype = np.dtype(cfg.dtype)
    params = {}
    for j, shape in enumerate(cfg.block().layer_shapes()):
        fan_in = int(np.prod(shape[1:]))
        params[f"c{i}.w{j}"] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"c{i}.b{j}"] = np.zeros(shape[0], dtype=dtype)
    params[f"c{i}.lam"] = np.array(cfg.lam, dtype=dtype)
    return params


def build(config: Optional[CascadeConfig] = None, **kwargs) -> CascadeModel:
    """He-initialised cascade (fan-in variant), zero biases, one lambda per DC layer."""
    cfg = replace(config, **kwargs) if config is not None else CascadeConfig(**kwargs)
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for i in range(cfg.n_c):
        params.update(_he_subnet(cfg, i, rng))
    return CascadeModel(cfg, params)


def grow_cascade(model: CascadeModel, seed: Optional[int] = None) -> CascadeModel:
    """Append one freshly He-initialised subnetwork, keeping the existing ones."""
    cfg = replace(model.config, n_c=model.config.n_c + 1)
    rng = np.random.default_rng(cfg.seed + 7919 * cfg.n_c if seed is None else seed)
    params = {k: v.copy() for k, v in model.params.items()}
    params.update(_he_subnet(cfg, cfg.n_c - 1, rng))
    return CascadeModel(cfg, params)


def count_params(model: CascadeModel) -> int:
    """Total scalar parameters, including one lambda per DC layer."""
    return int(sum(np.size(model.params[k]) for k in model.param_names()))


def formula_param_count(n_d: int, n_c: int, n_f: int = 64, kernel=(3, 3, 1), in_channels: int = 2) -> int:
    """Closed-form count: sum of ``(kx*ky*kt*n_in + 1) * n_out`` over layers, plus ``n_c``."""
    kvol = int(np.prod(kernel))
    chans = [in_channels] + [n_f] * (n_d - 1) + [2]
    per = sum((kvol * ci + 1) * co for ci, co in zip(chans[:-1], chans[1:]))
    return n_c * per + n_c


def estimate_memory(model: CascadeModel, input_dims, batch: int = 1, precision: Optional[int] = None) -> int:
    """Bytes held by the hidden activation maps during training.

    ``batch * N_x * N_y * N_t * n_f * n_c * (n_d - 1) * precision``.
    """
    cfg = model.config
    nx, ny, nt = input_dims
    if precision is None:
        precision = np.dtype(cfg.dtype).itemsize
    return int(batch * nx * ny * nt * cfg.n_f * cfg.n_c * (cfg.n_d - 1) * precision)


# -- forward --------------------------------------------------------------------


def _leaf_tensors(model: CascadeModel, requires_grad: bool) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad and model.trainable(k), name=k) for k, v in model.params.items()}


def forward(model: CascadeModel, s0: np.ndarray, mask: SamplingMask, leaves: Optional[dict] = None, return_stages: bool = False):
    """Run the cascade on batched zero-filled k-space ``s0`` (batch, X, Y, T).

    ``leaves`` maps parameter names to tensors (pass ``requires_grad`` leaves
    inside a :class:`~deepcascade.tensor.Tape` to train). Returns the output
    tensor ``(batch, 2, X, Y, T)`` and, if requested, every intermediate output.
    """
    cfg = model.config
    if leaves is None:
        leaves = _leaf_tensors(model, False)
    if s0.ndim != 4:
        raise ShapeError(f"s0 must be (batch, X, Y, T), got {s0.shape}")
    if mask.lines.shape[-2:] != s0.shape[-2:]:
        raise ShapeError(f"mask {mask.lines.shape} does not match k-space {s0.shape}")
    dtype = np.dtype(cfg.dtype)
    x = Tensor(to_channels(zero_filled(s0), dtype))
    block = cfg.block()
    stages = []
    for i in range(cfg.n_c):
        h = ds_apply(x, mask, "first" if i == 0 else "later", boundary=cfg.ds_boundary) if cfg.data_sharing else x
        ws = [leaves[f"c{i}.w{j}"] for j in range(cfg.n_d)]
        bs = [leaves[f"c{i}.b{j}"] for j in range(cfg.n_d)]
        h = cnn_forward(block, h, ws, bs)
        x = dc_apply(h, s0, mask, None if cfg.dc_mode == "hard" else leaves[f"c{i}.lam"])
        stages.append(x)
    return (x, stages) if return_stages else x


def _batched(s0, mask):
    s0 = np.asarray(s0)
    single = s0.ndim == 3
    if single:
        s0 = s0[None]
    if mask.lines.ndim == 2:
        mask = SamplingMask(np.broadcast_to(mask.lines, (s0.shape[0],) + mask.lines.shape))
    return s0, mask, single


def reconstruct(model: CascadeModel, s0: np.ndarray, mask: SamplingMask, return_stages: bool = False):
    """Reconstruct complex image sequence(s) from zero-filled k-space.

    Accepts ``(X, Y, T)`` or ``(batch, X, Y, T)`` k-space; returns complex arrays
    of the same shape (and the list of per-subnetwork outputs if requested).
    """
    s0, mask, single = _batched(s0, mask)
    out, stages = forward(model, s0, mask, return_stages=True)
    unpack = (lambda t: from_channels(t.data)[0]) if single else (lambda t: from_channels(t.data))
    if return_stages:
        return unpack(out), [unpack(s) for s in stages]
    return unpack(out)


# -- serialisation --------------------------------------------------------------


def save_model(model: CascadeModel, path) -> None:
    """Write the KCSD1 model file: magic, version, JSON descriptor, LE payload."""
    cfg = model.config
    names = model.param_names()
    descriptor = {
        "arch": cfg.name,
        "config": asdict(cfg),
        "precision": cfg.dtype,
        "params": [[n, list(np.shape(model.params[n]))] for n in names],
    }
    text = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    le = np.dtype(cfg.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(text)))
        fh.write(text)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype=le).tobytes())


def load_model(path) -> CascadeModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    try:
        version, n = struct.unpack_from("<II", raw, len(MAGIC))
        off = len(MAGIC) + 8
        descriptor = json.loads(raw[off : off + n].decode("utf-8"))
        off += n
        cfg = CascadeConfig(**descriptor["config"])
    except (struct.error, ValueError, KeyError, TypeError) as err:
        raise ModelFormatError(f"{path}: corrupt descriptor ({err})") from None
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    le = np.dtype(cfg.dtype).newbyteorder("<")
    params = {}
    for name, shape in descriptor["params"]:
        count = int(np.prod(shape))
        nbytes = count * le.itemsize
        if off + nbytes > len(raw):
            raise ModelFormatError(f"{path}: truncated payload at {name}")
        params[name] = np.frombuffer(raw, dtype=le, count=count, offset=off).reshape(shape).astype(cfg.dtype)
        off += nbytes
    if off != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return CascadeModel(cfg, params)
