"""End-to-end runs driven by a RunConfig: data preparation, training, ablations, gradcheck."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import (ClipArrays, PreprocessSpec, SyntheticSpec, apply_preprocess, fit_preprocess,
                   generate_synthetic, load_dataset, split_by_speaker, to_arrays)
from .evaluation import (AblationCell, EvalReport, evaluate, format_table, parse_subset,
                         table_csv)
from .gme import GateController, apply_gates, export_traces, fuse, inference_gates, sample_gates
from .model import ModelShape, SequenceModelParams, forward, mae_loss
from .training import (GmeResult, ReinforceConfig, TrainConfig, TrainResult, surrogate_objective,
                       train_gme, train_supervised)

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    train: ClipArrays
    val: ClipArrays
    test: ClipArrays
    preprocess: PreprocessSpec | None
    test_meta: list[dict]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.train.w.shape[2], self.train.a.shape[2], self.train.v.shape[2]


def prepare_data(cfg: RunConfig) -> PreparedData:
    d = cfg.data
    if d.synthetic is not None:
        spec = SyntheticSpec(**d.synthetic)
        n_tr, n_va, n_te = d.synthetic_split
        spec.n_clips = n_tr + n_va + n_te
        clips = generate_synthetic(spec, cfg.seed)
        parts = [clips[:n_tr], clips[n_tr:n_tr + n_va], clips[n_tr + n_va:]]
    elif d.dataset is not None:
        split = split_by_speaker(load_dataset(d.dataset), d.split_ratios, d.split_seed)
        parts = [split.train, split.val, split.test]
    else:
        parts = [load_dataset(p) for p in (d.train, d.val, d.test)]
    for name, part in zip(("train", "val", "test"), parts):
        if not part:
            raise ValueError(f"{name} split is empty")
    spec = fit_preprocess(parts[0], d.k_acoustic, d.k_visual, d.max_len)
    if not d.normalize:
        spec = PreprocessSpec(spec.selected, {m: [1.0] * len(i) for m, i in spec.selected.items()},
                              spec.max_len)
    parts = [apply_preprocess(p, spec) for p in parts]
    arrays = [to_arrays(p, d.max_len) for p in parts]
    return PreparedData(*arrays, spec, [c.meta for c in parts[2]])


def model_shape(cfg: RunConfig, d_in: int, attention: bool = True) -> ModelShape:
    return ModelShape(d_in=d_in, hidden=cfg.model.hidden, d_proj=cfg.model.d_proj,
                      head_units=cfg.model.head_units, attention=attention)


def train_config(cfg: RunConfig, modalities: Sequence[str], inner: bool = False) -> TrainConfig:
    o, c = cfg.optimizer, cfg.controller
    max_epochs = c.inner_max_epochs if inner and c.inner_max_epochs else o.max_epochs
    patience = c.inner_patience if inner and c.inner_patience else o.patience
    return TrainConfig(lr=o.lr, batch_size=o.batch_size, max_epochs=max_epochs,
                       patience=patience, max_steps=o.max_steps, seed=cfg.seed,
                       modalities=tuple(modalities))


def reinforce_config(cfg: RunConfig) -> ReinforceConfig:
    c = cfg.controller
    return ReinforceConfig(lr=c.lr, n_samples=c.n_samples, epoch_num=c.epoch_num, decay=c.decay,
                           advantage_mode=c.advantage_mode, hidden=c.hidden, seed=cfg.seed,
                           modalities=tuple(c.gated))


def init_controllers(cfg: RunConfig, data: PreparedData) -> dict[str, GateController]:
    dims = {"acoustic": data.dims[1], "visual": data.dims[2]}
    return {m: GateController.init(m, dims[m], cfg.controller.hidden, seed=cfg.seed + 1 + i)
            for i, m in enumerate(cfg.controller.gated)}


# ------------------------------------------------------------ run directory

def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _metrics_rows(history: Sequence[dict], prefix: Sequence = ()) -> list[list]:
    rows = []
    for h in history:
        for split in ("train", "val"):
            if f"{split}_mae" in h:
                rows.append(list(prefix) + [h["epoch"], split, h[f"{split}_mae"],
                                            h[f"{split}_acc"], h[f"{split}_f1"]])
    return rows


def _snapshot(cfg: RunConfig, run_dir: Path, data: PreparedData) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    if data.preprocess is not None:
        data.preprocess.save(run_dir / "preprocess.json")


def _report_json(report: EvalReport) -> dict:
    return {**report.summary(),
            "per_clip": [vars(r) for r in report.per_clip]}


# -------------------------------------------------------------------- runs

@dataclass
class SupervisedOutcome:
    params: SequenceModelParams
    result: TrainResult
    report: EvalReport


def run_supervised(cfg: RunConfig, attention: bool = True, modalities: Sequence[str] | None = None,
                   data: PreparedData | None = None, run_dir: Path | None = None) -> SupervisedOutcome:
    """Train LSTM (attention=False) or LSTM(A) and evaluate on the test split."""
    data = data or prepare_data(cfg)
    mods = tuple(modalities or cfg.modalities)
    init = SequenceModelParams.init(model_shape(cfg, sum(data.dims), attention), cfg.seed)
    result = train_supervised(init, data.train, data.val, train_config(cfg, mods))
    report = evaluate(result.params, data.test, mods)
    if run_dir is not None:
        _snapshot(cfg, run_dir, data)
        _write_csv(run_dir / "metrics.csv", ["epoch", "split", "mae", "acc", "f1"],
                   _metrics_rows(result.history))
        result.params.save(run_dir / "model.json")
        (run_dir / "test_report.json").write_text(json.dumps(_report_json(report)) + "\n")
    return SupervisedOutcome(result.params, result, report)


@dataclass
class GmeOutcome:
    result: GmeResult
    report: EvalReport


def run_gme(cfg: RunConfig, modalities: Sequence[str] | None = None,
            data: PreparedData | None = None, run_dir: Path | None = None,
            controllers: dict[str, GateController] | None = None,
            update_controllers: bool = True) -> GmeOutcome:
    """Gate-controller training followed by thresholded gating on the test split."""
    data = data or prepare_data(cfg)
    mods = tuple(modalities or cfg.modalities)
    ctrls = controllers if controllers is not None else init_controllers(cfg, data)
    template = SequenceModelParams.init(model_shape(cfg, sum(data.dims), True), cfg.seed)
    result = train_gme(ctrls, template, data.train, data.val,
                       train_config(cfg, mods, inner=True), reinforce_config(cfg),
                       update_controllers=update_controllers)
    report = evaluate(result.params, data.test, mods, controllers=result.controllers)
    if run_dir is not None:
        _snapshot(cfg, run_dir, data)
        rows = []
        for i, hist in enumerate(result.inner_histories):
            epoch, k = divmod(i, cfg.controller.n_samples)
            rows += _metrics_rows(hist, prefix=(epoch + 1, k + 1))
        _write_csv(run_dir / "metrics.csv",
                   ["controller_epoch", "k", "epoch", "split", "mae", "acc", "f1"], rows)
        _write_csv(run_dir / "rewards.csv", ["epoch", "k", "L_k", "b", "reward"],
                   [[r["epoch"], r["k"], r["loss"], r["baseline"], r["reward"]]
                    for r in result.rewards])
        result.params.save(run_dir / "model.json")
        (run_dir / "controllers.json").write_text(
            json.dumps([c.to_json() for c in result.controllers.values()]) + "\n")
        export_traces(inference_gates(result.controllers, data.test), run_dir / "test_gates.jsonl")
        (run_dir / "test_report.json").write_text(json.dumps(_report_json(report)) + "\n")
    return GmeOutcome(result, report)


def run_ablation(cfg: RunConfig, run_dir: Path | None = None,
                 data: PreparedData | None = None) -> list[AblationCell]:
    """Every (method x modality subset) cell with shared data and seeds.

    A failing cell is recorded with its error and the others still run.
    """
    data = data or prepare_data(cfg)
    cells = []
    for subset in cfg.subsets:
        mods = parse_subset(subset)
        for method in cfg.methods:
            try:
                if method == "GME-LSTM(A)":
                    report = run_gme(cfg, mods, data).report
                else:
                    report = run_supervised(cfg, method == "LSTM(A)", mods, data).report
                cells.append(AblationCell(method, mods, report))
            except Exception as exc:  # noqa: BLE001 -- one cell must not sink the table
                log.exception("ablation cell %s / %s failed", method, subset)
                cells.append(AblationCell(method, mods, None, f"{type(exc).__name__}: {exc}"))
    if run_dir is not None:
        _snapshot(cfg, run_dir, data)
        (run_dir / "ablation.txt").write_text(format_table(cells) + "\n")
        (run_dir / "ablation.csv").write_text(table_csv(cells))
    return cells


# --------------------------------------------------------------- gradcheck

@dataclass
class GradcheckResult:
    max_rel_error: float
    per_config: list[dict]


def _random_case(rng: np.random.Generator):
    H = int(rng.integers(1, 9))
    T = int(rng.integers(1, 7))
    d_w, d_a, d_v = (int(x) for x in rng.integers(1, 6, 3))
    shape = ModelShape(d_in=d_w + d_a + d_v, hidden=H, d_proj=int(rng.integers(1, 9)),
                       head_units=int(rng.integers(1, 9)), attention=True)
    params = SequenceModelParams.init(shape, int(rng.integers(2**31)))
    # move weights away from init so every nonlinearity is exercised
    params.tensors = {k: v + rng.normal(0, 0.3, v.shape) for k, v in params.tensors.items()}
    B = int(rng.integers(1, 5))
    lengths = rng.integers(1, T + 1, B)
    mask = np.arange(T)[None, :] < lengths[:, None]
    w, a, v = (rng.normal(0, 1, (B, T, d)) for d in (d_w, d_a, d_v))
    ctrls = {"acoustic": GateController.init("acoustic", d_a, hidden=int(rng.integers(1, 9)),
                                             seed=int(rng.integers(2**31))),
             "visual": GateController.init("visual", d_v, hidden=int(rng.integers(1, 9)),
                                           seed=int(rng.integers(2**31)))}
    data = ClipArrays([f"g{i}" for i in range(B)], ["s"] * B, [["t"] * T for _ in range(B)],
                      np.zeros(B), w, a, v, mask)
    traces = sample_gates(ctrls, data, int(rng.integers(2**31)))
    gated = apply_gates(data, traces)
    x = fuse(gated.w, gated.a, gated.v)
    return params, ctrls, traces, data, x, mask, B


def gradient_check(seed: int = 0, n_configs: int = 20, eps: float = 1e-5) -> GradcheckResult:
    """Reverse-mode vs central-difference gradients on random small GME-LSTM(A) cases.

    Covers the MAE loss w.r.t. every sequence-model tensor and the REINFORCE
    surrogate w.r.t. every controller tensor. Labels sit well away from the
    predictions so no residual crosses zero under the finite-difference step.
    """
    rng = np.random.default_rng(seed)
    rows, worst = [], 0.0
    for i in range(n_configs):
        params, ctrls, traces, data, x, mask, B = _random_case(rng)
        with nx.no_grad():
            y0, _ = forward(params, x, mask)
        labels = y0.data[:, 0] + rng.choice([-1.0, 1.0], B) * rng.uniform(1.0, 3.0, B)

        def loss_of(tensors):
            with nx.no_grad():
                y, _ = forward(SequenceModelParams(params.shape, tensors), x, mask)
                return mae_loss(y, labels).item()

        leaves = params.leaves()
        y, _ = forward(params, x, mask, leaves)
        analytic = nx.backward(mae_loss(y, labels), leaves.values())
        numeric = nx.numerical_gradient(loss_of, params.tensors, eps)
        errs = {f"model.{k}": nx.relative_error(analytic[k], numeric[k]) for k in analytic}

        rewards = rng.uniform(0.5, 1.5, 3)
        for mod, ctrl in ctrls.items():
            rows_x = data.features(mod)[mask]
            dec = np.stack([traces[mod].decisions[mask]] +
                           [rng.integers(0, 2, rows_x.shape[0]) for _ in range(2)])

            def obj_of(tensors, ctrl=ctrl, rows_x=rows_x, dec=dec):
                with nx.no_grad():
                    c = GateController(ctrl.modality, tensors)
                    return surrogate_objective(c, rows_x, dec, rewards).item()

            cl = ctrl.leaves()
            got = nx.backward(surrogate_objective(ctrl, rows_x, dec, rewards, cl), cl.values())
            num = nx.numerical_gradient(obj_of, ctrl.tensors, eps)
            errs.update({f"{mod}.{k}": nx.relative_error(got[k], num[k]) for k in got})
        top = max(errs.values())
        worst = max(worst, top)
        rows.append({"config": i, "H": params.shape.hidden, "T": int(mask.shape[1]),
                     "d_in": params.shape.d_in, "max_rel_error": top,
                     "worst_tensor": max(errs, key=errs.get)})
    return GradcheckResult(worst, rows)
