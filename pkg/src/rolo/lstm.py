"""LSTM cell, the windowed regressor built on it, and exact BPTT.

A window is an array ``(batch, T, input_dim)``; a single window is just
``batch == 1``. Every window starts from the zero state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import SeededRng, ShapeError, sigmoid, tanh_phi

COORDINATE = "coordinate"
HEATMAP = "heatmap"
MODES = (COORDINATE, HEATMAP)
STANDARD = "standard"
PAPER_LITERAL = "paper-literal"
VARIANTS = (STANDARD, PAPER_LITERAL)

GATES = ("i", "f", "o", "c")
LSTM_PARAM_NAMES = (
    "W_xi", "W_hi", "W_xf", "W_hf", "W_xo", "W_ho", "W_xc", "W_hc",
    "b_i", "b_f", "b_o", "b_c",
)
PARAM_NAMES = LSTM_PARAM_NAMES + ("readout_W", "readout_b")

_MAGIC = b"ROLOMODEL1\n"


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class RoloModel:
    """LSTM parameters plus a sigmoid readout from the hidden state."""

    params: dict[str, np.ndarray]
    input_dim: int
    hidden_dim: int
    mode: str = COORDINATE
    gate_variant: str = STANDARD
    heatmap_side: int = 32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.gate_variant not in VARIANTS:
            raise ValueError(f"unknown gate variant {self.gate_variant!r}")
        for name, shape in param_shapes(self.input_dim, self.hidden_dim, self.output_dim).items():
            arr = self.params.get(name)
            if arr is None:
                raise ShapeError(f"missing parameter {name}")
            if arr.shape != shape:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {shape}")

    @property
    def output_dim(self) -> int:
        return 4 if self.mode == COORDINATE else self.heatmap_side ** 2

    def copy(self) -> "RoloModel":
        return RoloModel(
            {k: v.copy() for k, v in self.params.items()},
            self.input_dim, self.hidden_dim, self.mode, self.gate_variant, self.heatmap_side,
            dict(self.meta),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def with_flat(self, theta: np.ndarray) -> "RoloModel":
        out = self.copy()
        pos = 0
        for k in PARAM_NAMES:
            n = out.params[k].size
            out.params[k] = np.asarray(theta[pos:pos + n], dtype=np.float64).reshape(out.params[k].shape)
            pos += n
        return out


def param_shapes(input_dim: int, hidden_dim: int, output_dim: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for g in GATES:
        shapes[f"W_x{g}"] = (hidden_dim, input_dim)
        shapes[f"W_h{g}"] = (hidden_dim, hidden_dim)
    for g in GATES:
        shapes[f"b_{g}"] = (hidden_dim,)
    shapes["readout_W"] = (output_dim, hidden_dim)
    shapes["readout_b"] = (output_dim,)
    return {k: shapes[k] for k in PARAM_NAMES}


def init_model(
    input_dim: int,
    hidden_dim: int,
    mode: str = COORDINATE,
    seed: int = 0,
    gate_variant: str = STANDARD,
    heatmap_side: int = 32,
) -> RoloModel:
    """Glorot-uniform weights, zero biases except the forget bias at 1.0."""
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError(f"dimensions must be positive, got input={input_dim}, hidden={hidden_dim}")
    output_dim = 4 if mode == COORDINATE else heatmap_side ** 2
    rng = SeededRng(seed)
    params = {}
    for name, shape in param_shapes(input_dim, hidden_dim, output_dim).items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    params["b_f"][:] = 1.0
    return RoloModel(params, input_dim, hidden_dim, mode, gate_variant, heatmap_side)


def zero_model(input_dim: int, hidden_dim: int, mode: str = COORDINATE,
               gate_variant: str = STANDARD, heatmap_side: int = 32) -> RoloModel:
    output_dim = 4 if mode == COORDINATE else heatmap_side ** 2
    params = {k: np.zeros(s) for k, s in param_shapes(input_dim, hidden_dim, output_dim).items()}
    return RoloModel(params, input_dim, hidden_dim, mode, gate_variant, heatmap_side)


def _candidate(z, variant):
    return tanh_phi(z) if variant == STANDARD else sigmoid(z)


def lstm_cell_forward(params, x_t, prev: LstmState, variant: str = STANDARD):
    """One LSTM update. Works for a single vector or a batch of rows.

    Returns the new state and a dict with the gate activations.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    hidden, input_dim = params["W_xi"].shape
    if x_t.shape[-1] != input_dim:
        raise ShapeError(f"input length {x_t.shape[-1]} does not match input_dim {input_dim}")
    if prev.h.shape[-1] != hidden or prev.c.shape[-1] != hidden:
        raise ShapeError(f"state length {prev.h.shape[-1]} does not match hidden_dim {hidden}")
    z = {g: x_t @ params[f"W_x{g}"].T + prev.h @ params[f"W_h{g}"].T + params[f"b_{g}"] for g in GATES}
    i = sigmoid(z["i"])
    f = sigmoid(z["f"])
    o = sigmoid(z["o"])
    g = _candidate(z["c"], variant)
    c = f * prev.c + i * g
    tc = tanh_phi(c)
    h = o * tc
    return LstmState(np.asarray(h), np.asarray(c)), {"i": i, "f": f, "o": o, "g": g, "tanh_c": tc}


@dataclass
class ForwardCache:
    x: np.ndarray
    h: list = field(default_factory=list)
    c: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    y: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.gates)


def _as_windows(model: RoloModel, inputs) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"window must be (T, D) or (batch, T, D), got {x.shape}")
    if x.shape[1] == 0 or x.shape[0] == 0:
        raise ValueError("empty window")
    if x.shape[2] != model.input_dim:
        raise ShapeError(f"input length {x.shape[2]} does not match input_dim {model.input_dim}")
    return x, single


def _stacked(params):
    """Gate weights stacked in i, f, o, c order for one matmul per step."""
    Wx = np.concatenate([params[f"W_x{g}"] for g in GATES], axis=0)
    Wh = np.concatenate([params[f"W_h{g}"] for g in GATES], axis=0)
    b = np.concatenate([params[f"b_{g}"] for g in GATES])
    return Wx, Wh, b


def model_forward_window(model: RoloModel, inputs):
    """Run a window from the zero state; return sigmoid readouts per step.

    ``inputs`` is ``(T, D)`` or ``(batch, T, D)``; outputs have the matching
    shape with ``D`` replaced by the readout size.
    """
    x, single = _as_windows(model, inputs)
    batch, T, _ = x.shape
    H = model.hidden_dim
    p = model.params
    Wx, Wh, b = _stacked(p)
    zx = x @ Wx.T + b
    h = np.zeros((batch, H))
    c = np.zeros((batch, H))
    cache = ForwardCache(x=x, h=[h], c=[c])
    for t in range(T):
        z = zx[:, t] + h @ Wh.T
        ifo = sigmoid(z[:, :3 * H])
        i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
        g = _candidate(z[:, 3 * H:], model.gate_variant)
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.h.append(h)
        cache.c.append(c)
        cache.gates.append({"i": i, "f": f, "o": o, "g": g, "tanh_c": tc})
    hs = np.stack(cache.h[1:], axis=1)
    outs = sigmoid(hs @ p["readout_W"].T + p["readout_b"])
    cache.y = [outs[:, t] for t in range(T)]
    return (outs[0] if single else outs), cache


def model_backward_window(model: RoloModel, cache: ForwardCache, d_outputs):
    """Exact gradients of a window loss given dL/d(outputs).

    Returns ``(grads, d_inputs)`` where ``grads`` maps every parameter name to
    an array of the parameter's shape.
    """
    dy = np.asarray(d_outputs, dtype=np.float64)
    if dy.ndim == 2:
        dy = dy[None]
    batch, T = cache.x.shape[:2]
    if dy.shape != (batch, T, model.output_dim) or cache.T != T:
        raise ShapeError(
            f"upstream gradient {dy.shape} does not match cached window "
            f"({batch}, {cache.T}, {model.output_dim})"
        )
    p = model.params
    H = model.hidden_dim
    Wx, Wh, _ = _stacked(p)
    ys = np.stack(cache.y, axis=1)
    hs = np.stack(cache.h[1:], axis=1)
    dz_r = dy * ys * (1.0 - ys)
    grads = {
        "readout_W": np.einsum("bto,bth->oh", dz_r, hs),
        "readout_b": dz_r.sum(axis=(0, 1)),
    }
    dh_out = dz_r @ p["readout_W"]
    dZ = np.empty((batch, T, 4 * H))
    dh_next = np.zeros((batch, H))
    dc_next = np.zeros((batch, H))
    for t in range(T - 1, -1, -1):
        gt = cache.gates[t]
        i, f, o, g, tc = gt["i"], gt["f"], gt["o"], gt["g"], gt["tanh_c"]
        dh = dh_out[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dZ[:, t, :H] = dc * g * i * (1.0 - i)
        dZ[:, t, H:2 * H] = dc * cache.c[t] * f * (1.0 - f)
        dZ[:, t, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        if model.gate_variant == STANDARD:
            dZ[:, t, 3 * H:] = dc * i * (1.0 - g * g)
        else:
            dZ[:, t, 3 * H:] = dc * i * g * (1.0 - g)
        dh_next = dZ[:, t] @ Wh
        dc_next = dc * f
    h_prev = np.stack(cache.h[:-1], axis=1)
    dWx = np.einsum("btk,btd->kd", dZ, cache.x)
    dWh = np.einsum("btk,bth->kh", dZ, h_prev)
    db = dZ.sum(axis=(0, 1))
    for n, gname in enumerate(GATES):
        rows = slice(n * H, (n + 1) * H)
        grads[f"W_x{gname}"] = dWx[rows]
        grads[f"W_h{gname}"] = dWh[rows]
        grads[f"b_{gname}"] = db[rows]
    dx = dZ @ Wx
    return {k: grads[k] for k in PARAM_NAMES}, dx


def save_model(model: RoloModel, path) -> None:
    """Write a self-describing binary file; reading it back is bit-exact."""
    header = {
        "format": "rolo-model",
        "version": 1,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "mode": model.mode,
        "gate_variant": model.gate_variant,
        "heatmap_side": model.heatmap_side,
        "dtype": "<f8",
        "arrays": [[k, list(model.params[k].shape)] for k in PARAM_NAMES],
        "meta": model.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for k in PARAM_NAMES:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())


def load_model(path) -> RoloModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a model file")
    pos = len(_MAGIC)
    n = int.from_bytes(data[pos:pos + 8], "little")
    pos += 8
    header = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    params = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        params[name] = arr.reshape(shape)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    return RoloModel(
        params, header["input_dim"], header["hidden_dim"], header["mode"],
        header["gate_variant"], header["heatmap_side"], header.get("meta", {}),
    )
