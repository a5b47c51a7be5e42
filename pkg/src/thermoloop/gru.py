"""Encoder-decoder GRU predictor for multi-step temperature forecasts.

Architecture: a single-layer GRU folds the n-step normalized temperature
history (one scalar per step) into a hidden state; a two-layer ReLU/linear
encoder condenses the m-step normalized candidate current sequence; a single
affine decoder maps the concatenated hidden vector to all m normalized
temperature predictions at once.

Cell equations (row-vector convention, ``@`` right-multiplies weights):

    z = sigmoid(x * w_z + h_prev @ u_z + b_z)
    r = sigmoid(x * w_r + h_prev @ u_r + b_r)
    h_cand = tanh(x * w_c + (r * h_prev) @ u_c + b_c)
    h = (1 - z) * h_prev + z * h_cand

The model operates entirely in normalized space; callers denormalize through
the dataset statistics embedded in checkpoints.

Checkpoint container (format 1): the ASCII magic line ``TLCKPT1``, a newline,
an 8-byte little-endian header length, a UTF-8 JSON header with ``dims``,
``normalization``, ``kind`` and the ordered tensor table (name + shape), then
the raw float64 little-endian C-order tensor payloads concatenated in table
order. The layout is stable across versions; readers must check the magic.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .accel import jit_kernel
from .datagen import Normalization

CHECKPOINT_MAGIC = b"TLCKPT1\n"


class NumericFault(RuntimeError):
    """A non-finite activation appeared during inference."""


@dataclass(frozen=True)
class ModelDims:
    history_len: int = 100
    horizon: int = 5
    gru_hidden: int = 32
    ctrl_hidden: int = 16

    def __post_init__(self):
        for name in ("history_len", "horizon", "gru_hidden", "ctrl_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelDims.{name} must be >= 1")


@dataclass
class ModelParams:
    """Trainable tensors; also reused as the shape-matched gradient container."""

    w_z: np.ndarray   # (H,) scalar-input weights, update gate
    u_z: np.ndarray   # (H, H)
    b_z: np.ndarray   # (H,)
    w_r: np.ndarray   # reset gate
    u_r: np.ndarray
    b_r: np.ndarray
    w_c: np.ndarray   # candidate activation
    u_c: np.ndarray
    b_c: np.ndarray
    w_i1: np.ndarray  # (m, C) control encoder, first layer
    b_i1: np.ndarray  # (C,)
    w_i2: np.ndarray  # (C, C) control encoder, second layer
    b_i2: np.ndarray  # (C,)
    w_y: np.ndarray   # (H + C, m) decoder
    b_y: np.ndarray   # (m,)

    TENSOR_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c",
                    "w_i1", "b_i1", "w_i2", "b_i2", "w_y", "b_y")

    def tensors(self):
        for name in self.TENSOR_NAMES:
            yield name, getattr(self, name)

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.tensors()})

    def check_finite(self) -> None:
        for name, arr in self.tensors():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter tensor {name} contains non-finite entries")

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(a, getattr(other, name)) for name, a in self.tensors())


def tensor_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    h, c, m = dims.gru_hidden, dims.ctrl_hidden, dims.horizon
    return {
        "w_z": (h,), "u_z": (h, h), "b_z": (h,),
        "w_r": (h,), "u_r": (h, h), "b_r": (h,),
        "w_c": (h,), "u_c": (h, h), "b_c": (h,),
        "w_i1": (m, c), "b_i1": (c,),
        "w_i2": (c, c), "b_i2": (c,),
        "w_y": (h + c, m), "b_y": (m,),
    }


def init_params(dims: ModelDims, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, seeded.

    Tensors are drawn in ``ModelParams.TENSOR_NAMES`` order, which pins the
    rng stream and therefore the reproducibility contract.
    """
    rng = np.random.default_rng(seed)
    shapes = tensor_shapes(dims)
    fan_in = {
        "w_z": 1, "u_z": dims.gru_hidden, "w_r": 1, "u_r": dims.gru_hidden,
        "w_c": 1, "u_c": dims.gru_hidden,
        "w_i1": dims.horizon, "w_i2": dims.ctrl_hidden,
        "w_y": dims.gru_hidden + dims.ctrl_hidden,
    }
    values = {}
    for name in ModelParams.TENSOR_NAMES:
        shape = shapes[name]
        if name.startswith("b_"):
            values[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in[name])
            values[name] = rng.uniform(-bound, bound, shape)
    return ModelParams(**values)


def zero_params_like(params: ModelParams) -> ModelParams:
    return ModelParams(**{name: np.zeros_like(arr) for name, arr in params.tensors()})


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_cell(x: float, h_prev: np.ndarray, params: ModelParams) -> np.ndarray:
    """One recurrent update for a scalar input."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if h_prev.shape != params.b_z.shape:
        raise ValueError(f"hidden state shape {h_prev.shape} does not match "
                         f"gru_hidden {params.b_z.shape}")
    z = _sigmoid(x * params.w_z + h_prev @ params.u_z + params.b_z)
    r = _sigmoid(x * params.w_r + h_prev @ params.u_r + params.b_r)
    h_cand = np.tanh(x * params.w_c + (r * h_prev) @ params.u_c + params.b_c)
    return (1.0 - z) * h_prev + z * h_cand


@jit_kernel
def _gru_forward(hist, w_z, u_z, b_z, w_r, u_r, b_r, w_c, u_c, b_c):
    """Batched unroll; returns hidden states plus per-step gate caches.

    hs[:, t] is the state before step t (hs[:, 0] == 0); hs[:, n] is the
    encoded history. Caches feed the training-time backward pass.
    """
    batch, n = hist.shape
    hidden = b_z.shape[0]
    hs = np.zeros((n + 1, batch, hidden))
    zs = np.empty((n, batch, hidden))
    rs = np.empty((n, batch, hidden))
    cs = np.empty((n, batch, hidden))
    h = np.zeros((batch, hidden))
    for t in range(n):
        az = np.dot(h, u_z)
        ar = np.dot(h, u_r)
        for b in range(batch):
            x = hist[b, t]
            az[b] += x * w_z + b_z
            ar[b] += x * w_r + b_r
        z = 1.0 / (1.0 + np.exp(-az))
        r = 1.0 / (1.0 + np.exp(-ar))
        ac = np.dot(r * h, u_c)
        for b in range(batch):
            ac[b] += hist[b, t] * w_c + b_c
        c = np.tanh(ac)
        h = (1.0 - z) * h + z * c
        zs[t] = z
        rs[t] = r
        cs[t] = c
        hs[t + 1] = h
    return hs, zs, rs, cs


def encode_history(history, params: ModelParams) -> np.ndarray:
    """Fold the history through the recurrent cell from a zero initial state."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 1:
        raise ValueError("history must be 1-D")
    hs, _, _, _ = _gru_forward(history[None, :].copy(), params.w_z, params.u_z, params.b_z,
                               params.w_r, params.u_r, params.b_r,
                               params.w_c, params.u_c, params.b_c)
    return hs[-1, 0]


def encode_history_batch(hist: np.ndarray, params: ModelParams, with_cache: bool = False):
    hist = np.ascontiguousarray(hist, dtype=np.float64)
    hs, zs, rs, cs = _gru_forward(hist, params.w_z, params.u_z, params.b_z,
                                  params.w_r, params.u_r, params.b_r,
                                  params.w_c, params.u_c, params.b_c)
    if with_cache:
        return hs[-1], (hs, zs, rs, cs)
    return hs[-1]


def encode_control(currents, params: ModelParams) -> np.ndarray:
    """Two-layer condenser of the normalized control sequence."""
    currents = np.asarray(currents, dtype=np.float64)
    if currents.shape != (params.w_i1.shape[0],):
        raise ValueError(f"control sequence shape {currents.shape} does not match "
                         f"horizon {params.w_i1.shape[0]}")
    hidden1 = np.maximum(currents @ params.w_i1 + params.b_i1, 0.0)
    return hidden1 @ params.w_i2 + params.b_i2


def decode(h_t: np.ndarray, h_i: np.ndarray, params: ModelParams) -> np.ndarray:
    return np.concatenate([h_t, h_i]) @ params.w_y + params.b_y


@dataclass(frozen=True)
class PredictorInput:
    history_temps: np.ndarray     # n normalized values
    control_currents: np.ndarray  # m normalized values


def predict(inp: PredictorInput, params: ModelParams, dims: ModelDims) -> np.ndarray:
    """Normalized m-step prediction; raises NumericFault naming the layer."""
    history = np.asarray(inp.history_temps, dtype=np.float64)
    currents = np.asarray(inp.control_currents, dtype=np.float64)
    if history.shape != (dims.history_len,):
        raise ValueError(f"history length {history.shape} != {dims.history_len}")
    if currents.shape != (dims.horizon,):
        raise ValueError(f"control length {currents.shape} != {dims.horizon}")
    h_t = encode_history(history, params)
    if not np.all(np.isfinite(h_t)):
        raise NumericFault("non-finite activation in history encoder")
    h_i = encode_control(currents, params)
    if not np.all(np.isfinite(h_i)):
        raise NumericFault("non-finite activation in control encoder")
    out = decode(h_t, h_i, params)
    if not np.all(np.isfinite(out)):
        raise NumericFault("non-finite activation in decoder")
    return out


def forward_batch(hist: np.ndarray, ctrl: np.ndarray, params: ModelParams,
                  with_cache: bool = False):
    """Batched normalized forward pass used by training.

    Returns predictions (B, m); with ``with_cache`` also the tuple of
    intermediates needed by the backward pass.
    """
    h_t, gru_cache = (encode_history_batch(hist, params, with_cache=True))
    a1 = ctrl @ params.w_i1 + params.b_i1
    h1 = np.maximum(a1, 0.0)
    h_i = h1 @ params.w_i2 + params.b_i2
    hcat = np.concatenate([h_t, h_i], axis=1)
    out = hcat @ params.w_y + params.b_y
    if not np.all(np.isfinite(out)):
        raise NumericFault("non-finite activation in batched forward pass")
    if with_cache:
        return out, (gru_cache, a1, h1, h_i, hcat)
    return out


def decode_candidates(h_t: np.ndarray, ctrl: np.ndarray, params: ModelParams) -> np.ndarray:
    """Decode many candidate control sequences against one encoded history.

    This is the per-tick hot path of the controller: the history is encoded
    once, then every swarm candidate costs only the small control encoder and
    the affine decoder.
    """
    a1 = ctrl @ params.w_i1 + params.b_i1
    h1 = np.maximum(a1, 0.0)
    h_i = h1 @ params.w_i2 + params.b_i2
    out = h_i @ params.w_y[h_t.shape[0]:] + h_t @ params.w_y[:h_t.shape[0]] + params.b_y
    return out


# --- checkpoint container ----------------------------------------------------


def save_checkpoint(path: str, params: ModelParams, dims: ModelDims,
                    normalization: Normalization, kind: str = "gru",
                    extra: dict | None = None) -> None:
    """Write the versioned binary container documented in the module docstring."""
    table = []
    payload = bytearray()
    for name, arr in params.tensors():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        table.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes(order="C")
    header = {
        "format": 1,
        "kind": kind,
        "dims": {"history_len": dims.history_len, "horizon": dims.horizon,
                 "gru_hidden": dims.gru_hidden, "ctrl_hidden": dims.ctrl_hidden},
        "normalization": {"temp_mean": normalization.temp_mean,
                          "temp_std": normalization.temp_std,
                          "current_scale": normalization.current_scale},
        "tensors": table,
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + bytes(payload)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[ModelParams, ModelDims, Normalization, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        (head_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        if header.get("format") != 1:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        dims = ModelDims(**header["dims"])
        expected = tensor_shapes(dims)
        values = {}
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in expected:
                raise ValueError(f"{path}: unknown tensor {name!r}")
            if shape != expected[name]:
                raise ValueError(f"{path}: tensor {name} has shape {shape}, "
                                 f"expected {expected[name]}")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated payload for tensor {name}")
            values[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        missing = set(ModelParams.TENSOR_NAMES) - set(values)
        if missing:
            raise ValueError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
    params = ModelParams(**values)
    norm = Normalization(**header["normalization"])
    meta = {"kind": header.get("kind", "gru")}
    meta.update(header.get("extra", {}))
    return params, dims, norm, meta
