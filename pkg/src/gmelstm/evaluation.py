"""Acc/F1/MAE metrics, evaluation reports, ablations and attention/gate inspection."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ClipArrays, MODALITIES, canonical_modality
from .gme import GateController, GateTrace, apply_gates, inference_gates, sample_gates
from .model import SequenceModelParams, predict_batch

log = logging.getLogger(__name__)


def binary_metrics(labels, predictions) -> tuple[float, float]:
    """Sign-based accuracy and positive-class F1 (value > 0 is positive)."""
    y = np.asarray(labels, dtype=np.float64).ravel()
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("binary_metrics of an empty set")
    if y.shape != p.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    yt, pt = y > 0, p > 0
    acc = float(np.count_nonzero(yt == pt)) / y.size
    tp = np.count_nonzero(yt & pt)
    precision = tp / np.count_nonzero(pt) if np.any(pt) else 0.0
    recall = tp / np.count_nonzero(yt) if np.any(yt) else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return acc, float(f1)


def mean_absolute_error(labels, predictions) -> float:
    y = np.asarray(labels, dtype=np.float64).ravel()
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("MAE of an empty set")
    return float(np.mean(np.abs(p - y)))


@dataclass
class ClipPrediction:
    clip_id: str
    label: float
    prediction: float
    alpha: list[float] | None = None
    gates: dict[str, list[int]] = field(default_factory=dict)


@dataclass
class EvalReport:
    acc: float
    f1: float
    mae: float
    per_clip: list[ClipPrediction]

    @classmethod
    def from_rows(cls, rows: Sequence[ClipPrediction]) -> "EvalReport":
        labels = [r.label for r in rows]
        preds = [r.prediction for r in rows]
        acc, f1 = binary_metrics(labels, preds)
        return cls(acc, f1, mean_absolute_error(labels, preds), list(rows))

    def recompute(self) -> "EvalReport":
        return EvalReport.from_rows(self.per_clip)

    def summary(self) -> dict:
        return {"acc": self.acc, "f1": self.f1, "mae": self.mae, "n": len(self.per_clip)}


def evaluate(params: SequenceModelParams, data: ClipArrays,
             modalities: Sequence[str] = MODALITIES,
             controllers: Mapping[str, GateController] | None = None,
             gate_mode: str = "threshold", seed: int = 0) -> EvalReport:
    """Predict every clip (gating first when controllers are given) and score."""
    traces: dict[str, GateTrace] = {}
    if controllers:
        if gate_mode == "threshold":
            traces = inference_gates(controllers, data)
        elif gate_mode == "sample":
            traces = sample_gates(controllers, data, seed)
        else:
            raise ValueError(f"gate_mode must be 'threshold' or 'sample', got {gate_mode!r}")
        data = apply_gates(data, traces)
    preds, alpha = predict_batch(params, data.inputs(modalities), data.mask)
    rows = []
    for i, cid in enumerate(data.clip_ids):
        m = data.mask[i]
        rows.append(ClipPrediction(
            cid, float(data.labels[i]), float(preds[i]),
            alpha[i, m].tolist() if alpha is not None else None,
            {mod: tr.decisions[i, m].astype(int).tolist() for mod, tr in traces.items()}))
    return EvalReport.from_rows(rows)


# ---------------------------------------------------------------- ablations

METHODS = ("LSTM", "LSTM(A)", "GME-LSTM(A)")
SUBSET_NAMES = {
    "text": ("language",), "audio": ("acoustic",), "video": ("visual",),
    "text+audio": ("language", "acoustic"), "text+video": ("language", "visual"),
    "text+audio+video": ("language", "acoustic", "visual"),
}


def parse_subset(name: str) -> tuple[str, ...]:
    if name in SUBSET_NAMES:
        return SUBSET_NAMES[name]
    mods = tuple(sorted({canonical_modality(p) for p in name.split("+")}, key=MODALITIES.index))
    if not mods:
        raise ValueError(f"empty modality subset {name!r}")
    return mods


def subset_label(mods: Sequence[str]) -> str:
    short = {"language": "text", "acoustic": "audio", "visual": "video"}
    return " + ".join(short[m] for m in mods)


@dataclass
class AblationCell:
    method: str
    modalities: tuple[str, ...]
    report: EvalReport | None
    error: str | None = None


def format_table(cells: Sequence[AblationCell]) -> str:
    """Aligned plain-text table: Method | Modalities | Acc | F-score | MAE."""
    header = ("Method", "Modalities", "Acc", "F-score", "MAE")
    rows = []
    for c in cells:
        if c.report is None:
            rows.append((c.method, subset_label(c.modalities), "-", "-", f"error: {c.error}"))
        else:
            rows.append((c.method, subset_label(c.modalities), f"{100 * c.report.acc:.1f}",
                         f"{100 * c.report.f1:.1f}", f"{c.report.mae:.3f}"))
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(5)]
    line = "-+-".join("-" * w for w in widths)
    fmt = lambda r: " | ".join(s.ljust(w) for s, w in zip(r, widths))
    return "\n".join([fmt(header), line] + [fmt(r) for r in rows])


def table_csv(cells: Sequence[AblationCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "modalities", "acc", "f1", "mae", "error"])
    for c in cells:
        if c.report is None:
            w.writerow([c.method, "+".join(c.modalities), "", "", "", c.error])
        else:
            w.writerow([c.method, "+".join(c.modalities), c.report.acc, c.report.f1,
                        c.report.mae, ""])
    return buf.getvalue()


# --------------------------------------------------------------- inspection

@dataclass
class AttentionRow:
    clip_id: str
    tokens: list[str]
    alpha: list[float]
    argmax: int | None  # None when the maximum weight is shared


def inspect_attention(params: SequenceModelParams, data: ClipArrays,
                      modalities: Sequence[str] = MODALITIES, tie_tol: float = 1e-12) -> list[AttentionRow]:
    """Attention weight per token; the unique argmax is marked, ties are reported as such."""
    if not params.shape.attention:
        raise ValueError("model has no attention layer")
    _, alpha = predict_batch(params, data.inputs(modalities), data.mask)
    rows = []
    for i, cid in enumerate(data.clip_ids):
        m = data.mask[i]
        a = alpha[i, m]
        top = np.flatnonzero(a >= a.max() - tie_tol)
        rows.append(AttentionRow(cid, list(data.tokens[i][:int(m.sum())]), a.tolist(),
                                 int(top[0]) if len(top) == 1 else None))
    return rows


def render_attention(rows: Sequence[AttentionRow]) -> str:
    """Tokens with weights; the attended word is wrapped in **...**."""
    lines = []
    for r in rows:
        words = []
        for j, (tok, a) in enumerate(zip(r.tokens, r.alpha)):
            word = f"{tok}({a:.2f})"
            words.append(f"**{word}**" if j == r.argmax else word)
        note = "" if r.argmax is not None else "  [tie: no unique argmax]"
        lines.append(f"{r.clip_id}: " + " ".join(words) + note)
    return "\n".join(lines)


def gate_summary(traces: Mapping[str, GateTrace], flagged: np.ndarray | None = None) -> dict:
    """Pass rates and median pass probabilities, split by ``flagged`` steps when given."""
    out = {}
    for mod, tr in traces.items():
        probs, dec = tr.probs[tr.mask], tr.decisions[tr.mask]
        row = {"pass_rate": float(dec.mean()), "median_p": float(np.median(probs))}
        if flagged is not None:
            f = flagged[tr.mask]
            if f.any():
                row["median_p_flagged"] = float(np.median(probs[f]))
                row["pass_rate_flagged"] = float(dec[f].mean())
            if (~f).any():
                row["median_p_unflagged"] = float(np.median(probs[~f]))
                row["pass_rate_unflagged"] = float(dec[~f].mean())
        out[mod] = row
    return out
