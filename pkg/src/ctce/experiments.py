"""Experiment orchestration: training runs, evaluation, packet-drop sweeps and ablations.

Every artifact directory receives ``config.yaml`` with the fully resolved
configuration; metrics and CSV rows carry the config hash and seed.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, dump_run_config
from .mar import Tracker
from .metrics import EvalConfig, Metrics
from .model import ModelConfig, build_params
from .numerics import ParameterSet, checkpoint, no_grad
from .scenario import generate_scenario, scene_configs
from .system import VARIANTS, evaluate_results, run_scenes
from .training import (CheckpointMissingError, SceneData, build_forecast_samples, forecast_mse, load_params,
                       roadside_frames, scene_data, train_stage1, train_stage2)

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("pdr", "variant", "mAP", "mATE", "mASE", "mAOE")
ABLATION_COLUMNS = ("name", "use_tca", "source_mode", "k2", "config_hash", "mAP", "mATE", "mASE", "mAOE")

STAGE1_CKPT = "stage1.ckpt"
MODEL_CKPT = "model.ckpt"


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out / "config.yaml")
    return out


def train_scenes(cfg: RunConfig) -> list[SceneData]:
    return [scene_data(generate_scenario(c)) for c in scene_configs(cfg.scenario, cfg.n_train, cfg.train_seed)]


def eval_scenes(cfg: RunConfig) -> list[SceneData]:
    return [scene_data(generate_scenario(c)) for c in scene_configs(cfg.scenario, cfg.n_test, cfg.test_seed)]


def load_model(path: str | Path, model_cfg: ModelConfig) -> ParameterSet:
    params = build_params(model_cfg, 0)
    params.load_state(load_params(path))
    return params


# -- training -----------------------------------------------------------------------
@dataclass
class TrainResult:
    params: ParameterSet
    stage1_losses: list[float]
    stage2_losses: list[float]
    forecast_mse: tuple[float, float] | None = None


def run_train(cfg: RunConfig, stage: str = "both", scenes: Sequence[SceneData] | None = None,
              resume: bool = False) -> TrainResult:
    """Stage 1 (detection, ideal link, no MAR) then stage 2 (MAR forecaster only).

    Writes ``stage1.ckpt`` (with optimiser state, resumable), ``model.ckpt`` and
    ``train_log.csv``.  ``stage="2"`` requires an existing ``stage1.ckpt``.
    """
    out = _out(cfg)
    if stage not in ("1", "2", "both"):
        raise ValueError(f"unknown stage {stage!r}")
    scenes = list(scenes) if scenes is not None else train_scenes(cfg)
    params = build_params(cfg.model, cfg.seed)
    train_cfg = replace(cfg.train, seed=cfg.seed)
    s1_path = out / STAGE1_CKPT
    s1 = []
    if stage in ("1", "both"):
        s1 = train_stage1(scenes, params, cfg.model, train_cfg,
                          resume=s1_path if resume and s1_path.exists() else None,
                          checkpoint_path=s1_path).epoch_losses
    else:
        if not s1_path.exists():
            raise CheckpointMissingError(f"stage 2 needs a stage-1 checkpoint at {s1_path}")
        params.load_state(load_params(s1_path))
    s2, mse = [], None
    if stage in ("2", "both"):
        samples = build_forecast_samples(scenes, params, cfg.model, train_cfg.stage2_max_lag)
        s2 = train_stage2(samples, params, cfg.model, train_cfg)
    checkpoint.save(out / MODEL_CKPT, params)
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("stage", "epoch", "loss", "config_hash", "seed"))
        for i, l in enumerate(s1):
            w.writerow((1, i, f"{l:.8g}", cfg.hash(), cfg.seed))
        for i, l in enumerate(s2):
            w.writerow((2, i, f"{l:.8g}", cfg.hash(), cfg.seed))
    return TrainResult(params, s1, s2, mse)


# -- evaluation ---------------------------------------------------------------------
def metrics_record(cfg: RunConfig, m: Metrics, **extra) -> dict:
    rec = {"config_hash": cfg.hash(), "seed": cfg.seed, **extra, **m.to_dict(), "config": cfg.to_dict()}
    return rec


def write_detections(path: Path, results, scenes: Sequence[SceneData]) -> None:
    with open(path, "w") as fh:
        for si, r in enumerate(results):
            for f, boxes in enumerate(r.detections):
                fh.write(json.dumps({"scene": si, "frame_id": f, "delivered": r.delivered[f] if r.delivered else None,
                                     "boxes": [b.to_dict() for b in boxes]}) + "\n")


def write_track_log(path: Path, results) -> None:
    with open(path, "w") as fh:
        for si, r in enumerate(results):
            for rec in r.track_log:
                fh.write(json.dumps({"scene": si, **rec}) + "\n")


def run_eval(cfg: RunConfig, params: ParameterSet, scenes: Sequence[SceneData] | None = None) -> dict:
    """Metrics JSON, per-frame detections and the MAR track log at ``cfg.pdr`` for ``cfg.variant``."""
    out = _out(cfg)
    scenes = list(scenes) if scenes is not None else eval_scenes(cfg)
    results = run_scenes(scenes, params, cfg.model, cfg.variant, cfg.pdr, cfg.seed)
    m = evaluate_results(results, scenes, EvalConfig())
    rec = metrics_record(cfg, m, pdr=cfg.pdr, variant=cfg.variant,
                         reconstructed=sum(r.reconstructed for r in results),
                         unavailable=sum(r.unavailable for r in results))
    (out / "metrics.json").write_text(json.dumps(rec, indent=2))
    write_detections(out / "detections.jsonl", results, scenes)
    write_track_log(out / "track_log.jsonl", results)
    return rec


# -- sweep --------------------------------------------------------------------------
def _sweep_point(args) -> dict:
    state, model_cfg, scenes, variant, pdr, seed = args
    params = build_params(model_cfg, 0)
    params.load_state(state)
    m = evaluate_results(run_scenes(scenes, params, model_cfg, variant, pdr, seed), scenes, EvalConfig())
    return {"pdr": pdr, "variant": variant, "mAP": m.mAP, "mATE": m.mATE, "mASE": m.mASE, "mAOE": m.mAOE}


def workers() -> int:
    try:
        return max(1, int(os.environ.get("CTCE_THREADS", "1")))
    except ValueError:
        return 1


def sweep_rows(params: ParameterSet, model_cfg: ModelConfig, scenes: Sequence[SceneData],
               pdrs: Sequence[float], variants: Sequence[str] = VARIANTS, seed: int = 0) -> list[dict]:
    """One row per (pdr, variant), sorted by that key regardless of worker count."""
    jobs = [(params.state(), model_cfg, list(scenes), v, float(p), seed) for p in pdrs for v in variants]
    n = min(workers(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as ex:
            rows = list(ex.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    order = {v: i for i, v in enumerate(variants)}
    return sorted(rows, key=lambda r: (r["pdr"], order[r["variant"]]))


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in columns})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_sweep(cfg: RunConfig, params: ParameterSet, scenes: Sequence[SceneData] | None = None,
              variants: Sequence[str] = VARIANTS) -> list[dict]:
    """``sweep.csv`` (pdr, variant, mAP, mATE, mASE, mAOE), ``sweep.json`` and ``sweep.png``."""
    from .plotting import plot_sweep
    out = _out(cfg)
    scenes = list(scenes) if scenes is not None else eval_scenes(cfg)
    rows = sweep_rows(params, cfg.model, scenes, cfg.pdr_list, variants, cfg.seed)
    write_csv(out / "sweep.csv", rows, SWEEP_COLUMNS)
    (out / "sweep.json").write_text(json.dumps({"config_hash": cfg.hash(), "seed": cfg.seed, "rows": rows,
                                                "config": cfg.to_dict()}, indent=2))
    plot_sweep(rows, out / "sweep.png")
    return rows


# -- ablation -----------------------------------------------------------------------
def ablation_grid(cfg: RunConfig) -> list[tuple[str, ModelConfig]]:
    """Temporal-context toggles, the k2 list with both toggles on, and history source modes."""
    m = cfg.model
    grid = [("baseline", replace(m, use_tca=False, source_mode="none")),
            ("tca", replace(m, use_tca=True, source_mode="none")),
            ("tgf", replace(m, use_tca=False, source_mode="roadside")),
            ("tca+tgf", replace(m, use_tca=True, source_mode="roadside"))]
    grid += [(f"k2={k}", replace(m, use_tca=True, source_mode="roadside", k2=k))
             for k in cfg.ablation_k2 if k != m.k2]
    grid += [(f"source={s}", replace(m, use_tca=True, source_mode=s)) for s in ("ego", "fused")]
    return grid


def ablation_row(name: str, cfg: RunConfig, model_cfg: ModelConfig, train: Sequence[SceneData],
                 test: Sequence[SceneData]) -> dict:
    """Train stage 1 for ``model_cfg`` and evaluate it over an ideal link."""
    run_cfg = cfg.with_(model=model_cfg)
    params = build_params(model_cfg, cfg.seed)
    train_stage1(train, params, model_cfg, replace(cfg.train, seed=cfg.seed))
    m = evaluate_results(run_scenes(test, params, model_cfg, "no_mar", 0.0, cfg.seed), test, EvalConfig())
    return {"name": name, "use_tca": model_cfg.use_tca, "source_mode": model_cfg.source_mode, "k2": model_cfg.k2,
            "config_hash": run_cfg.hash(), "mAP": m.mAP, "mATE": m.mATE, "mASE": m.mASE, "mAOE": m.mAOE}


def run_ablation(cfg: RunConfig, train: Sequence[SceneData] | None = None,
                 test: Sequence[SceneData] | None = None, names: Sequence[str] | None = None) -> list[dict]:
    """``ablation.csv`` over the grid plus ``source_modes.csv`` and a bar chart of each."""
    from .plotting import plot_ablation
    out = _out(cfg)
    train = list(train) if train is not None else train_scenes(cfg)
    test = list(test) if test is not None else eval_scenes(cfg)
    grid = [(n, m) for n, m in ablation_grid(cfg) if names is None or n in names]
    rows = [ablation_row(n, cfg, m, train, test) for n, m in grid]
    temporal = [r for r in rows if not r["name"].startswith("source=")]
    by_name = {r["name"]: r for r in rows}
    sources = []
    for mode, key in (("roadside", "tca+tgf"), ("ego", "source=ego"), ("fused", "source=fused"), ("none", "tca")):
        if key in by_name:
            sources.append({**by_name[key], "name": mode})
    write_csv(out / "ablation.csv", temporal, ABLATION_COLUMNS)
    write_csv(out / "source_modes.csv", sources, ABLATION_COLUMNS)
    if temporal:
        plot_ablation(temporal, out / "ablation.png")
    if sources:
        plot_ablation(sources, out / "source_modes.png")
    return rows


def forecast_report(cfg: RunConfig, params: ParameterSet, scenes: Sequence[SceneData]) -> dict:
    """Held-out forecaster MSE against the copy-last baseline for single-frame drops."""
    samples = build_forecast_samples(scenes, params, cfg.model, 1)
    pred, base = forecast_mse(samples, params, cfg.model)
    return {"samples": len(samples), "mse": pred, "copy_last_mse": base}


def reconstruction_errors(scenes: Sequence[SceneData], params: ParameterSet, model_cfg: ModelConfig,
                          gate: float = 2.0) -> np.ndarray:
    """Distance from each reconstructed reference point to its constant-velocity object.

    Every frame after the first is dropped in turn (a single loss, the previous
    frame received); reconstructed points are attributed to the nearest live
    object within ``gate`` metres and kept only when that object never changes
    velocity.
    """
    errors = []
    for sd in scenes:
        tracks = sd.scenario.tracks
        tracker = Tracker(model_cfg)
        for t, frame in enumerate(roadside_frames(sd, params, model_cfg)):
            if t > 0 and tracker.candidates():
                probe = copy.deepcopy(tracker)
                with no_grad():
                    rec = probe.reconstruct(t, params)
                live = [tr for tr in tracks if tr.alive(t)]
                if live:
                    centers = np.stack([tr.center_at(t) for tr in live])
                    for p in rec.world_points():
                        dist = np.linalg.norm(centers - p, axis=1)
                        k = int(np.argmin(dist))
                        if dist[k] < gate and live[k].is_constant_velocity():
                            errors.append(float(dist[k]))
            tracker.observe(frame)
    return np.array(errors)
