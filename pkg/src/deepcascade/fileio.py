"""KTensorFile binary tensors and flat ``key=value`` run configurations."""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

__all__ = ["FormatError", "write_tensor", "read_tensor", "RunConfig", "CONFIG_KEYS"]

MAGIC = b"KTEN1\0\0\0"

# dtype code -> (numpy dtype, is_complex)
_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<c8"),
    2: np.dtype("<f8"),
    3: np.dtype("<c16"),
}
_KINDS = {(dt.kind, dt.itemsize): code for code, dt in _CODES.items()}


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def write_tensor(path, arr) -> None:
    """Write ``arr`` (real32/64 or complex64/128) in the KTensorFile layout."""
    arr = np.asarray(arr)
    if arr.dtype == np.bool_ or arr.dtype.kind in "iu":
        arr = arr.astype(np.float32)
    code = _KINDS.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + struct.pack("<I", code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    try:
        (ndims,) = struct.unpack_from("<I", raw, 8)
        dims = struct.unpack_from(f"<{ndims}I", raw, 12)
        (code,) = struct.unpack_from("<I", raw, 12 + 4 * ndims)
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    if code not in _CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = _CODES[code]
    off = 16 + 4 * ndims
    expected = math.prod(dims) * dt.itemsize
    if len(raw) - off != expected:
        raise FormatError(f"{path}: payload is {len(raw) - off} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dt, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _range(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    vals = [float(p) for p in parts]
    if len(vals) == 1:
        return vals[0]
    if len(vals) == 2 and vals[0] <= vals[1]:
        return tuple(vals)
    raise ValueError(f"expected a number or 'low,high', got {text!r}")


def _opt_range(text: str):
    return None if text.strip().lower() in ("", "none") else _range(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


CONFIG_KEYS = {
    # phantom
    "n_x": int,
    "n_y": int,
    "n_t": int,
    "pulsation": float,
    "drift": float,
    "period": float,
    "count": int,
    # mask
    "acc": _range,
    "n_central": int,
    "seed": int,
    # model
    "arch": str,
    "n_f": int,
    "kernel_size": int,
    "dynamic": _bool,
    "dc_mode": str,
    "lam": float,
    "train_lambda": _bool,
    "ds_boundary": str,
    "dtype": str,
    # training
    "lr": float,
    "beta1": float,
    "beta2": float,
    "weight_decay": float,
    "batch": int,
    "iters": int,
    "noise_range": _opt_range,
    "patch_width": _opt_int,
    "augment": _bool,
    "translate_px": int,
    "eval_every": int,
    "checkpoint_every": int,
    "n_test": int,
    "init_model": str,
}


class RunConfig(dict):
    """Typed ``key=value`` settings; unknown keys and bad values raise ``FormatError``."""

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                cfg[key] = CONFIG_KEYS[key](value)
            except ValueError as err:
                raise FormatError(f"{source}:{lineno}: bad value for {key}: {err}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))
