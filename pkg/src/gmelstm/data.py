"""Word-aligned multimodal clips: ingestion, preprocessing, splits, synthetic tasks."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MODALITIES = ("language", "acoustic", "visual")
GATED_MODALITIES = ("acoustic", "visual")
_KEYS = {"language": "w", "acoustic": "a", "visual": "v"}
_ALIASES = {
    "language": "language", "text": "language", "w": "language",
    "acoustic": "acoustic", "audio": "acoustic", "a": "acoustic",
    "visual": "visual", "video": "visual", "v": "visual",
}
MAX_LEN = 115
LABEL_RANGE = 3.0


class DatasetError(ValueError):
    pass


class SchemaError(DatasetError):
    pass


class DataError(DatasetError):
    pass


def canonical_modality(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown modality {name!r}; expected one of {MODALITIES}") from None


@dataclass
class MultimodalClip:
    """One labeled opinion clip with per-word aligned feature vectors."""

    clip_id: str
    speaker_id: str
    label: float
    tokens: list[str]
    w: np.ndarray
    a: np.ndarray
    v: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(len(self.tokens), -1)
        self.a = np.asarray(self.a, dtype=np.float64).reshape(len(self.tokens), -1)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(len(self.tokens), -1)

    def __len__(self):
        return len(self.tokens)

    def features(self, modality: str) -> np.ndarray:
        return getattr(self, _KEYS[canonical_modality(modality)])

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w.shape[1], self.a.shape[1], self.v.shape[1]

    def replace(self, **changes) -> "MultimodalClip":
        fields = dict(clip_id=self.clip_id, speaker_id=self.speaker_id, label=self.label,
                      tokens=list(self.tokens), w=self.w, a=self.a, v=self.v,
                      meta=dict(self.meta))
        fields.update(changes)
        return MultimodalClip(**fields)

    def to_json(self) -> dict:
        out = {
            "clip_id": self.clip_id,
            "speaker_id": self.speaker_id,
            "label": float(self.label),
            "steps": [
                {"token": tok, "w": self.w[i].tolist(), "a": self.a[i].tolist(),
                 "v": self.v[i].tolist()}
                for i, tok in enumerate(self.tokens)
            ],
        }
        if self.meta:
            out["meta"] = self.meta
        return out


# ------------------------------------------------------------------ file I/O

def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def save_dataset(clips: Sequence[MultimodalClip], path) -> Path:
    """Write clips as JSONL plus the ``<stem>.manifest.json`` dims sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for clip in clips:
            fh.write(json.dumps(clip.to_json()) + "\n")
    d_w, d_a, d_v = clips[0].dims if clips else (0, 0, 0)
    manifest = {"d_w": d_w, "d_a": d_a, "d_v": d_v, "count": len(clips)}
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _parse_clip(obj, lineno: int) -> MultimodalClip:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {lineno}: expected a JSON object")
    for key in ("clip_id", "speaker_id", "label", "steps"):
        if key not in obj:
            raise SchemaError(f"line {lineno}: missing field {key!r}")
    steps = obj["steps"]
    if not isinstance(steps, list) or not steps:
        raise SchemaError(f"line {lineno}: 'steps' must be a non-empty list")
    try:
        label = float(obj["label"])
    except (TypeError, ValueError):
        raise SchemaError(f"line {lineno}: label is not a number") from None
    if not math.isfinite(label):
        raise DataError(f"line {lineno}: non-finite label")
    if abs(label) > LABEL_RANGE:
        raise DataError(f"line {lineno}: label {label} outside [-3, 3]")
    tokens, cols = [], {"w": [], "a": [], "v": []}
    for j, step in enumerate(steps):
        if not isinstance(step, dict):
            raise SchemaError(f"line {lineno}: step {j} is not an object")
        for key in ("token", "w", "a", "v"):
            if key not in step:
                raise SchemaError(f"line {lineno}: step {j} missing {key!r}")
        tokens.append(str(step["token"]))
        for key in cols:
            cols[key].append(step[key])
    arrays = {}
    for key, rows in cols.items():
        widths = {len(r) if isinstance(r, list) else -1 for r in rows}
        if len(widths) != 1 or -1 in widths:
            raise SchemaError(f"line {lineno}: ragged or malformed '{key}' vectors")
        try:
            arr = np.asarray(rows, dtype=np.float64)
        except (TypeError, ValueError):
            raise SchemaError(f"line {lineno}: non-numeric '{key}' values") from None
        if not np.all(np.isfinite(arr)):
            raise DataError(f"line {lineno}: non-finite value in '{key}'")
        arrays[key] = arr
    return MultimodalClip(str(obj["clip_id"]), str(obj["speaker_id"]), label, tokens,
                          arrays["w"], arrays["a"], arrays["v"], dict(obj.get("meta") or {}))


def load_dataset(path) -> list[MultimodalClip]:
    """Read and validate a JSONL dataset (and its manifest, if present)."""
    path = Path(path)
    clips: list[MultimodalClip] = []
    dims = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            clip = _parse_clip(obj, lineno)
            if dims is None:
                dims = clip.dims
            elif clip.dims != dims:
                raise SchemaError(
                    f"line {lineno}: dims {clip.dims} differ from earlier clips {dims}")
            clips.append(clip)
    if not clips:
        warnings.warn(f"{path} contains no clips", stacklevel=2)
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if clips and tuple(manifest[k] for k in ("d_w", "d_a", "d_v")) != dims:
            raise SchemaError(f"{mpath}: declared dims disagree with data {dims}")
        if manifest.get("count", len(clips)) != len(clips):
            raise SchemaError(
                f"{mpath}: declared count {manifest['count']} but found {len(clips)} clips")
    return clips


# -------------------------------------------------------- feature selection

def f_scores(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Univariate regression F statistic per column; 0 for constant columns."""
    x = features - features.mean(axis=0)
    y = labels - labels.mean()
    xn = np.sqrt((x * x).sum(axis=0))
    yn = np.sqrt((y * y).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (y @ x) / (xn * yn)
    r = np.where((xn > 0) & (yn > 0), r, 0.0)
    r = np.clip(r, -1.0, 1.0)
    dof = len(labels) - 2
    with np.errstate(divide="ignore"):
        f = np.where(np.abs(r) < 1.0, r * r / (1.0 - r * r) * dof, np.inf)
    return f


def select_features(train: Sequence[MultimodalClip], modality: str, k: int) -> list[int]:
    """Top-``k`` feature indices of ``modality`` ranked by F statistic.

    Each clip contributes its time-averaged feature vector against its label.
    Ties keep the lower index first.
    """
    feats = np.stack([c.features(modality).mean(axis=0) for c in train])
    if k > feats.shape[1]:
        raise ValueError(f"k={k} exceeds {modality} dimension {feats.shape[1]}")
    labels = np.array([c.label for c in train])
    scores = f_scores(feats, labels)
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


# ----------------------------------------------------------- normalization

@dataclass
class PreprocessSpec:
    """Feature selection + max-abs scaling, fitted on the train split only."""

    selected: dict[str, list[int]]
    scales: dict[str, list[float]]
    max_len: int = MAX_LEN

    def __post_init__(self):
        for mod, idx in self.selected.items():
            if len(set(idx)) != len(idx):
                raise ValueError(f"duplicate feature indices for {mod}")
            if any(i < 0 for i in idx):
                raise ValueError(f"negative feature index for {mod}")
        for mod, sc in self.scales.items():
            if any(s <= 0 for s in sc):
                raise ValueError(f"scale factors for {mod} must be positive")

    def to_json(self) -> dict:
        return {"selected": self.selected, "scales": self.scales, "max_len": self.max_len}

    @classmethod
    def from_json(cls, obj: dict) -> "PreprocessSpec":
        return cls({k: list(map(int, v)) for k, v in obj["selected"].items()},
                   {k: list(map(float, v)) for k, v in obj["scales"].items()},
                   int(obj.get("max_len", MAX_LEN)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PreprocessSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def fit_preprocess(train: Sequence[MultimodalClip], k_acoustic: int | None = 5,
                   k_visual: int | None = 20, max_len: int = MAX_LEN) -> PreprocessSpec:
    """Pick the best acoustic/visual features, then fit max-abs scales on them."""
    if not train:
        raise ValueError("cannot fit preprocessing on an empty train split")
    selected, scales = {}, {}
    for mod, k in (("acoustic", k_acoustic), ("visual", k_visual)):
        d = train[0].features(mod).shape[1]
        idx = select_features(train, mod, k) if k is not None else list(range(d))
        selected[mod] = idx
        stacked = np.concatenate([c.features(mod)[:, idx] for c in train], axis=0)
        peak = np.abs(stacked).max(axis=0) if stacked.size else np.ones(len(idx))
        scales[mod] = [float(s) if s > 0 else 1.0 for s in peak]
    return PreprocessSpec(selected, scales, max_len)


def apply_preprocess(clips: Sequence[MultimodalClip], spec: PreprocessSpec) -> list[MultimodalClip]:
    out = []
    for c in clips:
        changes = {}
        for mod in ("acoustic", "visual"):
            idx = spec.selected[mod]
            changes[_KEYS[mod]] = c.features(mod)[:, idx] / np.asarray(spec.scales[mod])
        out.append(c.replace(**changes))
    return out


def normalize(clips: Sequence[MultimodalClip], spec_or_train) -> tuple[list[MultimodalClip], PreprocessSpec]:
    """Scale acoustic/visual features by train-split max-abs; language untouched.

    ``spec_or_train`` is either a fitted :class:`PreprocessSpec` or the train
    clips to fit one on (all features kept). Values are not clipped, so
    held-out data may exceed 1 in magnitude.
    """
    if isinstance(spec_or_train, PreprocessSpec):
        spec = spec_or_train
    else:
        spec = fit_preprocess(list(spec_or_train), None, None)
    return apply_preprocess(clips, spec), spec


# ------------------------------------------------------- padding and arrays

def pad_truncate(clip: MultimodalClip, max_len: int = MAX_LEN):
    """Fixed-length copies of the clip's features plus a validity mask.

    Returns ``(w, a, v, mask)``; long clips keep their first ``max_len`` steps.
    """
    n = min(len(clip), max_len)
    out = []
    for feats in (clip.w, clip.a, clip.v):
        buf = np.zeros((max_len, feats.shape[1]))
        buf[:n] = feats[:n]
        out.append(buf)
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return out[0], out[1], out[2], mask


@dataclass
class ClipArrays:
    """A padded batch of clips: (N, T, d) features and an (N, T) mask."""

    clip_ids: list[str]
    speakers: list[str]
    tokens: list[list[str]]
    labels: np.ndarray
    w: np.ndarray
    a: np.ndarray
    v: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.clip_ids)

    @property
    def max_len(self) -> int:
        return self.mask.shape[1]

    def features(self, modality: str) -> np.ndarray:
        return getattr(self, _KEYS[canonical_modality(modality)])

    def take(self, idx) -> "ClipArrays":
        idx = np.asarray(idx, dtype=int)
        return ClipArrays([self.clip_ids[i] for i in idx], [self.speakers[i] for i in idx],
                          [self.tokens[i] for i in idx], self.labels[idx], self.w[idx],
                          self.a[idx], self.v[idx], self.mask[idx])

    def with_features(self, **changes) -> "ClipArrays":
        fields = dict(w=self.w, a=self.a, v=self.v)
        for mod, arr in changes.items():
            fields[_KEYS[canonical_modality(mod)]] = arr
        return ClipArrays(self.clip_ids, self.speakers, self.tokens, self.labels,
                          fields["w"], fields["a"], fields["v"], self.mask)

    def inputs(self, modalities: Sequence[str] = MODALITIES) -> np.ndarray:
        """Fused (N, T, d_w + d_a + d_v) inputs; modalities not listed are zeroed."""
        from .gme import fuse

        keep = {canonical_modality(m) for m in modalities}
        parts = [self.features(m) if m in keep else np.zeros_like(self.features(m))
                 for m in MODALITIES]
        return fuse(*parts)


def to_arrays(clips: Sequence[MultimodalClip], max_len: int = MAX_LEN) -> ClipArrays:
    if not clips:
        raise ValueError("no clips to batch")
    padded = [pad_truncate(c, max_len) for c in clips]
    return ClipArrays(
        [c.clip_id for c in clips], [c.speaker_id for c in clips],
        [c.tokens[:max_len] for c in clips],
        np.array([c.label for c in clips], dtype=np.float64),
        np.stack([p[0] for p in padded]), np.stack([p[1] for p in padded]),
        np.stack([p[2] for p in padded]), np.stack([p[3] for p in padded]),
    )


def concat_arrays(*parts: ClipArrays) -> ClipArrays:
    return ClipArrays(
        sum((p.clip_ids for p in parts), []), sum((p.speakers for p in parts), []),
        sum((p.tokens for p in parts), []),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.w for p in parts]), np.concatenate([p.a for p in parts]),
        np.concatenate([p.v for p in parts]), np.concatenate([p.mask for p in parts]))


# ---------------------------------------------------------------- splitting

@dataclass
class DatasetSplit:
    train: list[MultimodalClip]
    val: list[MultimodalClip]
    test: list[MultimodalClip]

    @staticmethod
    def _speakers(clips) -> set[str]:
        return {c.speaker_id for c in clips}

    @property
    def speaker_sets(self) -> tuple[set[str], set[str], set[str]]:
        return self._speakers(self.train), self._speakers(self.val), self._speakers(self.test)

    def check_disjoint(self) -> None:
        tr, va, te = self.speaker_sets
        if tr & va or tr & te or va & te:
            raise DataError("speaker appears in more than one split")


# train/val/test video counts of the standard CMU-MOSI protocol
MOSI_RATIOS = (52, 10, 31)


def split_by_speaker(clips: Sequence[MultimodalClip], ratios=MOSI_RATIOS, seed: int = 0) -> DatasetSplit:
    """Speaker-disjoint train/val/test split with clip shares near ``ratios``.

    Speakers are shuffled, then laid end to end by clip count; each speaker
    goes to the split whose cumulative share contains the midpoint of that
    speaker's clips.
    """
    speakers = sorted({c.speaker_id for c in clips})
    if len(speakers) < 3:
        raise ValueError(f"need at least 3 speakers for a 3-way split, got {len(speakers)}")
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise ValueError("ratios must be three positive numbers")
    bounds = np.cumsum(ratios / ratios.sum())
    counts: dict[str, int] = {}
    for c in clips:
        counts[c.speaker_id] = counts.get(c.speaker_id, 0) + 1
    rng = np.random.default_rng(seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    total = float(len(clips))
    assign: dict[str, int] = {}
    seen = 0
    for spk in order:
        mid = (seen + counts[spk] / 2.0) / total
        assign[spk] = int(np.searchsorted(bounds, mid, side="right").clip(0, 2))
        seen += counts[spk]
    # every split gets at least one speaker
    for j in range(3):
        if j not in assign.values():
            donor = max(range(3), key=lambda s: sum(1 for v in assign.values() if v == s))
            movable = [s for s in order if assign[s] == donor]
            assign[movable[-1] if j > donor else movable[0]] = j
    groups: list[list[MultimodalClip]] = [[], [], []]
    for c in clips:
        groups[assign[c.speaker_id]].append(c)
    split = DatasetSplit(*groups)
    split.check_disjoint()
    return split


# ------------------------------------------------------------ synthetic data

TASKS = ("keyword", "complement", "noise")


@dataclass
class SyntheticSpec:
    """Planted-structure task definition.

    ``keyword``: one timestep's language vector flags itself and carries the
    label; every other step is noise. ``complement``: a flagged step has
    label-free language while its visual vector carries the label.
    ``noise``: a random subset of steps has visual vectors replaced by large-variance
    noise whose first component runs against the label; clean visual steps are weakly
    informative.
    """

    task: str = "keyword"
    n_clips: int = 200
    length: int = 10
    min_length: int | None = None
    d_w: int = 6
    d_a: int = 3
    d_v: int = 4
    n_speakers: int = 20
    noise_fraction: float = 0.4
    noise_scale: float = 3.0
    noise_offset: float = 0.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown synthetic task {self.task!r}; expected one of {TASKS}")
        if self.length < 1 or self.n_clips < 1:
            raise ValueError("length and n_clips must be positive")
        if self.d_w < 2:
            raise ValueError("synthetic tasks need d_w >= 2")


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> list[MultimodalClip]:
    """Reproducible clips; ``meta`` records the planted structure per clip."""
    rng = np.random.default_rng(seed)
    lo = spec.min_length or spec.length
    clips = []
    for n in range(spec.n_clips):
        length = int(rng.integers(lo, spec.length + 1))
        y = float(rng.uniform(-LABEL_RANGE, LABEL_RANGE))
        s = y / LABEL_RANGE
        w = rng.normal(0.0, 0.5, (length, spec.d_w))
        w[:, 0] = 0.0
        a = rng.normal(0.0, 0.1, (length, spec.d_a))
        v = rng.normal(0.0, 0.1, (length, spec.d_v))
        tokens = [f"w{int(i)}" for i in rng.integers(0, 50, length)]
        meta: dict = {}
        if spec.task == "keyword":
            k = int(rng.integers(length))
            w[k, 0] = 1.0
            w[k, 1] = s + rng.normal(0.0, 0.05)
            tokens[k] = "KEY"
            meta["planted"] = k
        elif spec.task == "complement":
            k = int(rng.integers(length))
            w[k, 0] = 1.0
            v[k, 0] = s + rng.normal(0.0, 0.05)
            tokens[k] = "it"
            meta["planted"] = k
            # language elsewhere hints at the sign only weakly
            w[:, 1] += 0.15 * s
        else:
            w[:, 1] += 0.3 * s
            v[:, 0] += 0.5 * s
            noisy = rng.random(length) < spec.noise_fraction
            m = int(noisy.sum())
            if m:
                v[noisy] = rng.normal(spec.noise_offset, spec.noise_scale, (m, spec.d_v))
                v[noisy, 0] -= 1.5 * s
            meta["noise"] = [int(i) for i in np.flatnonzero(noisy)]
        clips.append(MultimodalClip(
            clip_id=f"{spec.task}-{seed}-{n:05d}",
            speaker_id=f"spk{int(rng.integers(spec.n_speakers)):03d}",
            label=y, tokens=tokens, w=w, a=a, v=v, meta=meta))
    return clips
