"""Two-stage training: end-to-end detection without MAR, then the MAR embedding forecaster."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import FRAME_PERIOD, Box3D, Pose, QueryFrame, frame_time
from .losses import Stage1LossConfig, stage1_loss, stage2_loss
from .mar import Tracker, associate, copy_last_embeddings, kf_predict, predict_embeddings
from .model import STAGE1_PREFIXES, STAGE2_PREFIXES, ModelConfig
from .numerics import ParameterSet, Tensor, no_grad
from .numerics import checkpoint
from .numerics import tensor as T
from .roadside import RoadsideState, rsu_step
from .scenario import Observation, Scenario, evaluation_targets, observe
from .vehicle import EgoState, ev_forward, head_outputs

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class CheckpointMissingError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 10.0
    seed: int = 0
    # stage 2
    stage2_epochs: int = 10
    stage2_lr: float = 5e-3
    stage2_batch: int = 128
    stage2_max_lag: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimiser -----------------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay and an externally supplied learning rate."""

    def __init__(self, params: ParameterSet, paths: Sequence[str], weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.paths = list(paths)
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {p: np.zeros_like(params[p].data) for p in self.paths}
        self.v = {p: np.zeros_like(params[p].data) for p in self.paths}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for p in self.paths:
            g = grads[p]
            m = self.m[p] = self.b1 * self.m[p] + (1 - self.b1) * g
            v = self.v[p] = self.b2 * self.v[p] + (1 - self.b2) * g * g
            w = self.params[p].data
            self.params[p].data = w - lr * self.wd * w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{p}": a for p, a in self.m.items()}
        out.update({f"opt.v.{p}": a for p, a in self.v.items()})
        out["opt.step"] = np.array([float(self.step_count)])
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.paths:
            self.m[p] = state[f"opt.m.{p}"].copy()
            self.v[p] = state[f"opt.v.{p}"].copy()
        self.step_count = int(state["opt.step"][0])


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def trainable_paths(params: ParameterSet, prefixes: Sequence[str]) -> list[str]:
    return [p for p in params if p.startswith(tuple(prefixes))]


# -- cached scene data ---------------------------------------------------------------
@dataclass
class SceneData:
    """Everything the learned pipeline consumes from one scene, precomputed."""

    rsu_obs: list[list[Observation]]
    ego_obs: list[list[Observation]]
    rsu_poses: list[Pose]
    ego_poses: list[Pose]
    targets: list[list[Box3D]]
    scenario: Scenario | None = None

    @property
    def n_frames(self) -> int:
        return len(self.ego_obs)


def scene_data(sc: Scenario) -> SceneData:
    n = sc.config.n_frames
    return SceneData([observe(sc, sc.coop, f) for f in range(n)],
                     [observe(sc, sc.ego, f) for f in range(n)],
                     [sc.coop.pose_at(f) for f in range(n)],
                     [sc.ego.pose_at(f) for f in range(n)],
                     [evaluation_targets(sc, f) for f in range(n)], sc)


# -- stage 1 -----------------------------------------------------------------------
@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def _checkpoint_state(params: ParameterSet, opt: AdamW, epoch: int) -> dict[str, np.ndarray]:
    state = params.state()
    state.update(opt.state())
    state["train.epoch"] = np.array([float(epoch)])
    return state


def save_training_checkpoint(path, params: ParameterSet, opt: AdamW, epoch: int) -> None:
    checkpoint.save(path, _checkpoint_state(params, opt, epoch))


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissingError(f"no checkpoint at {path}")
    state = checkpoint.load(path)
    return {k: v for k, v in state.items() if not k.startswith(("opt.", "train."))}


def train_stage1(scenes: Sequence[SceneData], params: ParameterSet, model_cfg: ModelConfig,
                 cfg: TrainConfig = TrainConfig(), loss_cfg: Stage1LossConfig = Stage1LossConfig(),
                 resume: str | Path | None = None, checkpoint_path: str | Path | None = None,
                 on_epoch: Callable[[int, float], None] | None = None) -> TrainLog:
    """Per-frame AdamW steps over whole scenes under ideal communication, MAR off.

    Parameters are updated in place.  The scene order of each epoch is a pure
    function of ``(cfg.seed, epoch)`` so a resumed run replays identically.
    """
    model_cfg = replace(model_cfg, use_mar=False)
    paths = trainable_paths(params, STAGE1_PREFIXES)
    opt = AdamW(params, paths, cfg.weight_decay, cfg.betas, cfg.eps)
    start = 0
    if resume is not None:
        state = checkpoint.load(resume)
        params.load_state({k: v for k, v in state.items() if k in params}, strict=False)
        opt.load_state(state)
        start = int(state["train.epoch"][0])
    total = cfg.epochs * sum(s.n_frames for s in scenes)
    out = TrainLog()
    for epoch in range(start, cfg.epochs):
        order = np.random.default_rng([cfg.seed, 0x57A1, epoch]).permutation(len(scenes))
        losses = []
        for si in order:
            for loss in _scene_steps(scenes[si], params, model_cfg, opt, cfg, loss_cfg, total):
                losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        out.epoch_losses.append(mean_loss)
        out.step_losses.extend(losses)
        log.info("stage1 epoch %d loss %.5f", epoch, mean_loss)
        if checkpoint_path is not None:
            save_training_checkpoint(checkpoint_path, params, opt, epoch + 1)
        if on_epoch:
            on_epoch(epoch, mean_loss)
    return out


def _scene_steps(sd: SceneData, params, model_cfg, opt: AdamW, cfg: TrainConfig,
                 loss_cfg: Stage1LossConfig, total: int):
    rs = RoadsideState(model_cfg, params)
    es = EgoState(model_cfg, params)
    for f in range(sd.n_frames):
        q = rsu_step(sd.rsu_obs[f], sd.rsu_poses[f], f, rs)
        fused = ev_forward(sd.ego_obs[f], sd.ego_poses[f], f, q, es)
        if fused.count == 0:
            continue
        logits, reg = head_outputs(fused, params, model_cfg)
        if not (np.isfinite(logits.data).all() and np.isfinite(reg.data).all()):
            raise DivergenceError(f"non-finite head outputs at step {opt.step_count}")
        loss, _ = stage1_loss(logits, reg, fused.ref_points, sd.targets[f], loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite stage-1 loss at step {opt.step_count}")
        grads = params.grads(loss)
        grads = {p: grads[p] for p in opt.paths}
        clip_grads(grads, cfg.clip_norm)
        opt.step(grads, cosine_lr(cfg.lr, opt.step_count, total))
        yield value


# -- stage 2 -----------------------------------------------------------------------
@dataclass
class ForecastSamples:
    """Track embedding histories with the embedding actually observed at the target time."""

    histories: list[list[tuple[float, np.ndarray]]]
    target_times: np.ndarray
    targets: np.ndarray
    lags: np.ndarray

    def __len__(self) -> int:
        return len(self.histories)

    def subset(self, idx) -> "ForecastSamples":
        return ForecastSamples([self.histories[i] for i in idx], self.target_times[idx],
                               self.targets[idx], self.lags[idx])


def roadside_frames(sd: SceneData, params: ParameterSet, model_cfg: ModelConfig) -> list[QueryFrame]:
    """Transmitted roadside frames of one scene under the frozen stage-1 parameters."""
    rs = RoadsideState(model_cfg, params)
    with no_grad():
        return [rsu_step(sd.rsu_obs[f], sd.rsu_poses[f], f, rs).detached() for f in range(sd.n_frames)]


def forecast_samples(frames: Sequence[QueryFrame], model_cfg: ModelConfig, max_lag: int = 1) -> ForecastSamples:
    """Self-supervised samples from a tracker run over consecutive received frames.

    Before frame ``t`` is observed, every confirmed track is predicted to the
    frames ``t .. t + max_lag - 1`` and associated with the real queries there;
    each association is one sample (history, target time, true embedding).
    """
    hist, times, tgts, lags = [], [], [], []
    tracker = Tracker(model_cfg)
    for t, frame in enumerate(frames):
        cands = tracker.candidates()
        for lag in range(1, max_lag + 1):
            k = t + lag - 1
            if not cands or k >= len(frames):
                break
            target = frames[k]
            tt = target.timestamp
            pred = [kf_predict(c, tt - c.time, tracker.kcfg) for c in cands]
            pairs, _, _ = associate(pred, target.world_points(), tracker.cfg.gate)
            for i, j in pairs:
                hist.append(list(cands[i].emb_history))
                times.append(tt)
                tgts.append(target.embeddings.data[j])
                lags.append(lag)
        tracker.observe(frame)
    d = model_cfg.d
    return ForecastSamples(hist, np.array(times), np.array(tgts).reshape(-1, d), np.array(lags, dtype=np.int64))


def merge_samples(parts: Sequence[ForecastSamples], d: int) -> ForecastSamples:
    parts = [p for p in parts if len(p)]
    if not parts:
        return ForecastSamples([], np.zeros(0), np.zeros((0, d)), np.zeros(0, dtype=np.int64))
    return ForecastSamples([h for p in parts for h in p.histories],
                           np.concatenate([p.target_times for p in parts]),
                           np.concatenate([p.targets for p in parts]),
                           np.concatenate([p.lags for p in parts]))


def build_forecast_samples(scenes: Sequence[SceneData], params: ParameterSet, model_cfg: ModelConfig,
                           max_lag: int = 1) -> ForecastSamples:
    return merge_samples([forecast_samples(roadside_frames(sd, params, model_cfg), model_cfg, max_lag)
                          for sd in scenes], model_cfg.d)


def _forecast_batches(s: ForecastSamples):
    """Group sample indices by target time; histories of different lengths are padded and masked."""
    groups: dict[int, list[int]] = {}
    for i in range(len(s.histories)):
        groups.setdefault(round(s.target_times[i] / FRAME_PERIOD), []).append(i)
    return list(groups.values())


def forecast(s: ForecastSamples, params: ParameterSet, model_cfg: ModelConfig) -> Tensor:
    """Predicted embeddings for every sample, in sample order."""
    outs, order = [], []
    for idx in _forecast_batches(s):
        outs.append(predict_embeddings([s.histories[i] for i in idx], s.target_times[idx[0]], params, model_cfg))
        order.extend(idx)
    inv = np.argsort(np.array(order))
    return T.take_rows(T.concat(outs, axis=0), inv)


def forecast_mse(s: ForecastSamples, params: ParameterSet, model_cfg: ModelConfig) -> tuple[float, float]:
    """(predictor MSE, copy-last baseline MSE)."""
    with no_grad():
        pred = forecast(s, params, model_cfg).data
    base = copy_last_embeddings(s.histories)
    return float(np.mean((pred - s.targets) ** 2)), float(np.mean((base - s.targets) ** 2))


def train_stage2(samples: ForecastSamples, params: ParameterSet, model_cfg: ModelConfig,
                 cfg: TrainConfig = TrainConfig()) -> list[float]:
    """Fit only ``mar.*`` parameters to the MSE between forecast and observed embeddings."""
    paths = trainable_paths(params, STAGE2_PREFIXES)
    if not len(samples):
        return []
    frozen = [p for p in params if p not in paths]
    saved = {p: params[p].requires_grad for p in frozen}
    for p in frozen:
        params[p].requires_grad = False
    try:
        opt = AdamW(params, paths, cfg.weight_decay, cfg.betas, cfg.eps)
        rng = np.random.default_rng([cfg.seed, 0x57A2])
        n_batches = math.ceil(len(samples) / cfg.stage2_batch)
        total = cfg.stage2_epochs * n_batches
        losses = []
        for epoch in range(cfg.stage2_epochs):
            perm = rng.permutation(len(samples))
            epoch_losses = []
            for b in range(n_batches):
                batch = samples.subset(perm[b * cfg.stage2_batch:(b + 1) * cfg.stage2_batch])
                loss = stage2_loss(forecast(batch, params, model_cfg), batch.targets)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite stage-2 loss at step {opt.step_count}")
                grads = params.grads(loss)
                grads = {p: grads[p] for p in paths}
                clip_grads(grads, cfg.clip_norm)
                opt.step(grads, cosine_lr(cfg.stage2_lr, opt.step_count, total))
                epoch_losses.append(value)
            losses.append(float(np.mean(epoch_losses)))
            log.info("stage2 epoch %d loss %.6f", epoch, losses[-1])
    finally:
        for p, rg in saved.items():
            params[p].requires_grad = rg
    return losses
