"""LSTM with temporal attention over fused word-level inputs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelShape:
    d_in: int
    hidden: int = 64
    d_proj: int | None = None
    head_units: int = 50
    attention: bool = True

    @property
    def proj(self) -> int:
        return self.d_proj if self.d_proj is not None else self.hidden


def _tensor_shapes(shape: ModelShape) -> dict[str, tuple[int, int]]:
    H = shape.hidden
    out = {
        "W": (shape.d_in, shape.proj),
        "U": (shape.proj + H, 4 * H),
        "b": (1, 4 * H),
        "head1": (H, shape.head_units),
        "head2": (shape.head_units, 1),
        "head2_b": (1, 1),
    }
    if shape.attention:
        out["w_attn"] = (H, 1)
    return out


@dataclass
class SequenceModelParams:
    """Trainable tensors; gate columns of ``U`` and ``b`` are ordered i, f, o, m."""

    shape: ModelShape
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = _tensor_shapes(self.shape)
        if set(expected) != set(self.tensors):
            raise DimensionError(
                f"parameter names {sorted(self.tensors)} != expected {sorted(expected)}")
        for name, shp in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shp:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shp}")
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"{name} contains non-finite values")
            self.tensors[name] = arr

    @classmethod
    def init(cls, shape: ModelShape, seed: int = 0) -> "SequenceModelParams":
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights; forget-gate bias 1."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, (fan_in, fan_out) in _tensor_shapes(shape).items():
            if name in ("b", "head2_b"):
                continue
            s = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-s, s, (fan_in, fan_out))
        H = shape.hidden
        b = np.zeros((1, 4 * H))
        b[0, H:2 * H] = 1.0
        tensors["b"] = b
        tensors["head2_b"] = np.zeros((1, 1))
        return cls(shape, tensors)

    @classmethod
    def zeros(cls, shape: ModelShape) -> "SequenceModelParams":
        return cls(shape, {k: np.zeros(s) for k, s in _tensor_shapes(shape).items()})

    def copy(self) -> "SequenceModelParams":
        return SequenceModelParams(self.shape, {k: v.copy() for k, v in self.tensors.items()})

    def leaves(self) -> dict[str, Tensor]:
        return {k: nx.parameter(v, name=k) for k, v in self.tensors.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: nx.constant(v) for k, v in self.tensors.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    # persistence
    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "shape": asdict(self.shape),
            "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in self.tensors.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceModelParams":
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format version {version!r}")
        tensors = {}
        for name, t in obj["tensors"].items():
            data = np.asarray(t["data"], dtype=np.float64)
            if data.size != int(np.prod(t["shape"])):
                raise DimensionError(f"{name}: {data.size} values for shape {t['shape']}")
            tensors[name] = data.reshape(t["shape"])
        return cls(ModelShape(**obj["shape"]), tensors)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def load(cls, path) -> "SequenceModelParams":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class LstmState:
    c: np.ndarray
    h: np.ndarray


def _cell(pre: Tensor, h_prev: Tensor, c_prev: Tensor, U_h: Tensor, H: int):
    g = nx.add(pre, nx.matmul(h_prev, U_h))
    sig = nx.sigmoid(nx.slice_cols(g, 0, 3 * H))
    m = nx.tanh(nx.slice_cols(g, 3 * H, 4 * H))
    i = nx.slice_cols(sig, 0, H)
    f = nx.slice_cols(sig, H, 2 * H)
    o = nx.slice_cols(sig, 2 * H, 3 * H)
    c = nx.add(nx.hadamard(f, c_prev), nx.hadamard(i, m))
    h = nx.hadamard(o, nx.tanh(c))
    return c, h


def _split_U(p: Mapping[str, Tensor], shape: ModelShape):
    return nx.slice_rows(p["U"], 0, shape.proj), nx.slice_rows(p["U"], shape.proj,
                                                               shape.proj + shape.hidden)


def lstm_step(params: SequenceModelParams, x_t, prev: LstmState | None = None) -> LstmState:
    """One recurrence: gates from U [x_t W; h_prev] + b, then c and h updates."""
    shape = params.shape
    x = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != shape.d_in:
        raise DimensionError(f"input has length {x.shape[1]}, model expects {shape.d_in}")
    H = shape.hidden
    if prev is None:
        prev = LstmState(np.zeros(H), np.zeros(H))
    p = params.constants()
    U_x, U_h = _split_U(p, shape)
    with nx.no_grad():
        pre = nx.add(nx.matmul(nx.matmul(nx.constant(x), p["W"]), U_x), p["b"])
        c, h = _cell(pre, nx.constant(prev.h), nx.constant(prev.c), U_h, H)
    return LstmState(c.data[0].copy(), h.data[0].copy())


def attention_pool(params: SequenceModelParams, hidden_states, mask=None):
    """Soft attention over one clip's hidden states (T x H).

    Returns ``(z, alpha)`` with alpha = masked softmax of w_attn' h_t and
    z = sum_t alpha_t h_t.
    """
    hs = np.asarray(hidden_states, dtype=np.float64)
    if hs.ndim != 2 or hs.shape[0] == 0:
        raise nx.EmptySequenceError("attention over an empty sequence")
    mask = np.ones(hs.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    with nx.no_grad():
        z, alpha = _attend(nx.constant(hs), mask.reshape(1, -1),
                           nx.constant(params.tensors["w_attn"]))
    return z.data[0].copy(), alpha.data[0].copy()


def _attend(h_all: Tensor, mask: np.ndarray, w_attn: Tensor):
    steps = mask.shape[1]
    logits = nx.fold_time(nx.matmul(h_all, w_attn), steps)
    alpha = nx.masked_softmax(logits, mask)
    return nx.time_weighted_sum(h_all, alpha), alpha


def forward(params: SequenceModelParams, inputs: np.ndarray, mask: np.ndarray,
            leaves: Mapping[str, Tensor] | None = None):
    """Batched forward pass.

    ``inputs`` is (B, T, d_in), ``mask`` (B, T). Returns ``(y_hat, alpha)``:
    a (B x 1) prediction tensor and a (B x T) attention tensor (``None`` for
    the attention-free LSTM, which reads out the last valid state).
    Masked steps carry the previous state forward unchanged.
    """
    shape = params.shape
    inputs = np.asarray(inputs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if inputs.ndim != 3 or inputs.shape[2] != shape.d_in:
        raise DimensionError(f"inputs {inputs.shape} do not match d_in={shape.d_in}")
    if mask.shape != inputs.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match inputs {inputs.shape[:2]}")
    if not np.all(mask.any(axis=1)):
        raise nx.EmptySequenceError("a clip has no valid timestep")
    # columns past the last valid step of every clip contribute nothing
    steps = int(np.flatnonzero(mask.any(axis=0)).max()) + 1
    inputs, mask = inputs[:, :steps], mask[:, :steps]
    B, H = inputs.shape[0], shape.hidden

    p = leaves if leaves is not None else params.constants()
    U_x, U_h = _split_U(p, shape)
    x_tm = nx.constant(inputs.transpose(1, 0, 2).reshape(steps * B, shape.d_in))
    pre_all = nx.add(nx.matmul(nx.matmul(x_tm, p["W"]), U_x), p["b"])

    h = nx.constant(np.zeros((B, H)))
    c = nx.constant(np.zeros((B, H)))
    hs = []
    for t in range(steps):
        pre = nx.slice_rows(pre_all, t * B, (t + 1) * B) if steps > 1 else pre_all
        c_new, h_new = _cell(pre, h, c, U_h, H)
        keep = mask[:, t]
        if keep.all():
            c, h = c_new, h_new
        else:
            c = nx.select_rows(keep, c_new, c)
            h = nx.select_rows(keep, h_new, h)
        hs.append(h)

    if shape.attention:
        h_all = nx.concat_rows(hs) if steps > 1 else hs[0]
        z, alpha = _attend(h_all, mask, p["w_attn"])
    else:
        z, alpha = h, None
    hidden = nx.relu(nx.matmul(z, p["head1"]))
    y_hat = nx.add(nx.matmul(hidden, p["head2"]), p["head2_b"])
    return y_hat, alpha


def predict(params: SequenceModelParams, clip_inputs, mask=None):
    """Prediction for one clip of fused vectors (T x d_in): ``(y_hat, alpha)``."""
    x = np.asarray(clip_inputs, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"clip inputs must be (T, d_in), got {x.shape}")
    mask = np.ones(x.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    with nx.no_grad():
        y, alpha = forward(params, x[None], mask[None])
    a = None
    if alpha is not None:
        a = np.zeros(x.shape[0])
        a[:alpha.cols] = alpha.data[0]
    return float(y.data[0, 0]), a


def predict_batch(params: SequenceModelParams, inputs, mask):
    """Predictions (B,) and attention (B, T) or ``None``, without a graph."""
    with nx.no_grad():
        y, alpha = forward(params, inputs, mask)
    a = None
    if alpha is not None:
        a = np.zeros(np.asarray(mask).shape)
        a[:, :alpha.cols] = alpha.data
    return y.data[:, 0].copy(), a


def mae_loss(predictions, labels) -> Tensor:
    """(1/N) sum |y_hat - y|; subgradient 0 at zero residual."""
    pred = predictions if isinstance(predictions, Tensor) else \
        nx.constant(np.asarray(predictions, dtype=np.float64).reshape(-1, 1))
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] == 0 or pred.rows == 0:
        raise ValueError("mae_loss of an empty batch")
    if pred.shape != y.shape:
        raise DimensionError(f"{pred.rows} predictions for {y.shape[0]} labels")
    return nx.mean_all(nx.absolute(nx.sub(pred, nx.constant(y))))
