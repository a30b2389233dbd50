"""Gated multimodal embedding: per-timestep on/off controllers for acoustic and visual inputs."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import GATED_MODALITIES, ClipArrays, canonical_modality
from .numerics import DimensionError, Tensor

CONTROLLER_HIDDEN = 32
_PARAM_NAMES = ("layer1", "b1", "layer2", "b2")


@dataclass
class GateController:
    """Two sigmoid layers mapping one modality vector to a pass probability."""

    modality: str
    tensors: dict[str, np.ndarray]

    @classmethod
    def init(cls, modality: str, d_mod: int, hidden: int = CONTROLLER_HIDDEN,
             seed: int = 0) -> "GateController":
        rng = np.random.default_rng(seed)
        s1, s2 = 1.0 / np.sqrt(d_mod), 1.0 / np.sqrt(hidden)
        return cls(canonical_modality(modality), {
            "layer1": rng.uniform(-s1, s1, (d_mod, hidden)),
            "b1": np.zeros((1, hidden)),
            "layer2": rng.uniform(-s2, s2, (hidden, 1)),
            "b2": np.zeros((1, 1)),
        })

    @classmethod
    def constant(cls, modality: str, d_mod: int, logit: float,
                 hidden: int = CONTROLLER_HIDDEN) -> "GateController":
        """Input-independent controller; ``logit=+1e3`` always passes, ``-1e3`` never."""
        return cls(canonical_modality(modality), {
            "layer1": np.zeros((d_mod, hidden)), "b1": np.zeros((1, hidden)),
            "layer2": np.zeros((hidden, 1)), "b2": np.full((1, 1), float(logit)),
        })

    @property
    def d_mod(self) -> int:
        return self.tensors["layer1"].shape[0]

    def copy(self) -> "GateController":
        return GateController(self.modality, {k: v.copy() for k, v in self.tensors.items()})

    def leaves(self) -> dict[str, Tensor]:
        return {k: nx.parameter(self.tensors[k], name=k) for k in _PARAM_NAMES}

    def forward(self, x, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
        """Pass probabilities for the rows of ``x`` as an (N x 1) tensor."""
        x = x if isinstance(x, Tensor) else nx.constant(x)
        if x.cols != self.d_mod:
            raise DimensionError(
                f"{self.modality} controller expects {self.d_mod} features, got {x.cols}")
        p = leaves if leaves is not None else {k: nx.constant(v) for k, v in self.tensors.items()}
        hidden = nx.sigmoid(nx.add(nx.matmul(x, p["layer1"]), p["b1"]))
        return nx.sigmoid(nx.add(nx.matmul(hidden, p["layer2"]), p["b2"]))

    def to_json(self) -> dict:
        return {"modality": self.modality,
                "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                            for k, v in self.tensors.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "GateController":
        return cls(obj["modality"], {k: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
                                     for k, t in obj["tensors"].items()})


def pass_probability(ctrl: GateController, x_mod) -> np.ndarray | float:
    """p = sigmoid(layer2' sigmoid(layer1' x + b1) + b2) for one vector or a matrix of rows."""
    x = np.asarray(x_mod, dtype=np.float64)
    with nx.no_grad():
        p = ctrl.forward(x.reshape(-1, x.shape[-1])).data[:, 0]
    return float(p[0]) if x.ndim == 1 else p


@dataclass
class GateTrace:
    """Binary pass decisions for one gated modality over a padded batch of clips."""

    modality: str
    clip_ids: list[str]
    decisions: np.ndarray   # (N, T) in {0, 1}; 0 on padding
    probs: np.ndarray       # (N, T); 0 on padding
    mask: np.ndarray        # (N, T) validity

    def valid_decisions(self) -> np.ndarray:
        return self.decisions[self.mask]

    def valid_probs(self) -> np.ndarray:
        return self.probs[self.mask]

    def records(self) -> list[dict]:
        out = []
        for i, cid in enumerate(self.clip_ids):
            m = self.mask[i]
            out.append({"clip_id": cid, "modality": self.modality,
                        "decisions": [int(c) for c in self.decisions[i, m]],
                        "probs": [float(p) for p in self.probs[i, m]]})
        return out


def _probabilities(ctrl: GateController, data: ClipArrays) -> np.ndarray:
    feats = data.features(ctrl.modality)
    probs = np.zeros(data.mask.shape)
    probs[data.mask] = pass_probability(ctrl, feats[data.mask])
    return probs


def _clip_rng(seed: int, clip_id: str, modality: str) -> np.random.Generator:
    key = (zlib.crc32(clip_id.encode()), GATED_MODALITIES.index(modality))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def sample_gates(controllers: Mapping[str, GateController] | Sequence[GateController],
                 data: ClipArrays, seed: int) -> dict[str, GateTrace]:
    """Draw c_t ~ Bernoulli(p_t) at every valid step; one RNG stream per (seed, clip, modality)."""
    ctrls = list(controllers.values()) if isinstance(controllers, Mapping) else list(controllers)
    traces = {}
    for ctrl in ctrls:
        probs = _probabilities(ctrl, data)
        decisions = np.zeros(probs.shape, dtype=np.int8)
        for i, cid in enumerate(data.clip_ids):
            m = data.mask[i]
            u = _clip_rng(seed, cid, ctrl.modality).random(int(m.sum()))
            decisions[i, m] = u < probs[i, m]
        traces[ctrl.modality] = GateTrace(ctrl.modality, list(data.clip_ids), decisions,
                                          probs, data.mask.copy())
    return traces


def inference_gates(controllers: Mapping[str, GateController] | Sequence[GateController],
                    data: ClipArrays, threshold: float = 0.5) -> dict[str, GateTrace]:
    """Deterministic decisions: pass iff p >= threshold."""
    ctrls = list(controllers.values()) if isinstance(controllers, Mapping) else list(controllers)
    traces = {}
    for ctrl in ctrls:
        probs = _probabilities(ctrl, data)
        decisions = ((probs >= threshold) & data.mask).astype(np.int8)
        traces[ctrl.modality] = GateTrace(ctrl.modality, list(data.clip_ids), decisions,
                                          probs, data.mask.copy())
    return traces


def apply_gates(data: ClipArrays, traces: Mapping[str, GateTrace]) -> ClipArrays:
    """Zero the rejected acoustic/visual vectors; language is never gated."""
    changes = {}
    for mod, trace in traces.items():
        mod = canonical_modality(mod)
        if mod not in GATED_MODALITIES:
            raise ValueError(f"{mod} is not a gated modality")
        if trace.clip_ids != list(data.clip_ids) or trace.decisions.shape != data.mask.shape:
            raise ValueError(f"{mod} gate trace does not cover this batch of clips")
        if np.any(trace.mask != data.mask):
            raise ValueError(f"{mod} gate trace mask differs from the clips' mask")
        changes[mod] = data.features(mod) * trace.decisions[:, :, None]
    return data.with_features(**changes)


def fuse(x_w, x_a, x_v) -> np.ndarray:
    """Concatenate [language; acoustic; visual] along the feature axis."""
    x_w, x_a, x_v = (np.asarray(x, dtype=np.float64) for x in (x_w, x_a, x_v))
    if not (x_w.shape[:-1] == x_a.shape[:-1] == x_v.shape[:-1]):
        raise DimensionError(
            f"cannot fuse modalities with shapes {x_w.shape}, {x_a.shape}, {x_v.shape}")
    return np.concatenate([x_w, x_a, x_v], axis=-1)


def split_fused(x, dims: tuple[int, int, int]):
    d_w, d_a, d_v = dims
    x = np.asarray(x)
    if x.shape[-1] != d_w + d_a + d_v:
        raise DimensionError(f"fused width {x.shape[-1]} != {d_w}+{d_a}+{d_v}")
    return x[..., :d_w], x[..., d_w:d_w + d_a], x[..., d_w + d_a:]


def export_traces(traces: Mapping[str, GateTrace] | Sequence[GateTrace], path) -> Path:
    """One JSON line per (clip, modality): clip_id, modality, decisions, probs."""
    items = traces.values() if isinstance(traces, Mapping) else traces
    path = Path(path)
    with open(path, "w") as fh:
        for trace in items:
            for rec in trace.records():
                fh.write(json.dumps(rec) + "\n")
    return path


def read_traces(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
