"""Roadside stack: query generation, temporal context aggregation, top-N selection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import FrameTag, HistoryBuffer, Pose, QueryFrame
from .model import ModelConfig
from .numerics import ParameterSet, Tensor, mha_cross_attention, mlp_forward, position_encode
from .numerics import tensor as T
from .scenario import Observation

CENTER_SCALE = 50.0


def observation_features(obs: Sequence[Observation], cfg: ModelConfig) -> np.ndarray:
    """Per-observation input vector: center, its sinusoidal code, log dims, yaw sin/cos, confidence."""
    if not obs:
        return np.zeros((0, cfg.obs_features))
    centers = np.stack([o.box.center for o in obs])
    dims = np.stack([o.box.dims for o in obs])
    yaw = np.array([o.box.yaw for o in obs])
    conf = np.array([o.confidence for o in obs])
    return np.concatenate([
        centers / CENTER_SCALE,
        position_encode(centers, cfg.pos_dim_per_axis, cfg.pos_base),
        np.log(dims),
        np.sin(yaw)[:, None], np.cos(yaw)[:, None],
        conf[:, None],
    ], axis=1)


def generate_queries(obs: Sequence[Observation], pose: Pose, frame_id: int, params: ParameterSet,
                     cfg: ModelConfig, prefix: str = "rsu.gen", agent_id: int = 1,
                     tag: FrameTag = FrameTag.ROADSIDE_RAW) -> QueryFrame:
    """One query per observation; ref_point is the observed center in sensor coordinates."""
    if not obs:
        return QueryFrame.empty(agent_id, frame_id, pose, cfg.d, tag)
    emb = mlp_forward(observation_features(obs, cfg), cfg.specs()["gen"], params, prefix)
    return QueryFrame(agent_id, frame_id, pose,
                      np.stack([o.box.center for o in obs]), emb,
                      np.array([o.confidence for o in obs]), tag)


def tca(current: QueryFrame, history: HistoryBuffer | Sequence[QueryFrame], params: ParameterSet,
        cfg: ModelConfig, prefix: str = "rsu.tca") -> QueryFrame:
    """Residual cross-attention of current queries over all stored history queries."""
    frames = [f for f in history if f.count]
    out = replace(current, tag=FrameTag.ROADSIDE_TEMPORAL)
    if not frames or current.count == 0:
        return out
    keys = T.concat([f.embeddings for f in frames], axis=0)
    ctx = mha_cross_attention(current.embeddings, keys, keys, cfg.heads, params, prefix)
    return replace(out, embeddings=current.embeddings + ctx)


def select_order(f: QueryFrame) -> np.ndarray:
    """Indices by confidence descending; ties by smaller x, y, z, then original index."""
    idx = np.arange(f.count)
    p = f.ref_points
    return np.lexsort((idx, p[:, 2], p[:, 1], p[:, 0], -f.confidences))


def select_top(f: QueryFrame, n_tx: int) -> QueryFrame:
    if n_tx < 0:
        raise ValueError("n_tx must be non-negative")
    return f.subset(select_order(f)[:n_tx])


@dataclass
class RoadsideState:
    cfg: ModelConfig
    params: ParameterSet
    history: HistoryBuffer = None
    agent_id: int = 1

    def __post_init__(self):
        if self.history is None:
            self.history = HistoryBuffer(self.cfg.k1)


def rsu_step(obs: Sequence[Observation], pose: Pose, frame_id: int, state: RoadsideState) -> QueryFrame:
    """generate -> TCA over past k1 raw frames -> store raw -> keep top N_tx."""
    cfg = state.cfg
    raw = generate_queries(obs, pose, frame_id, state.params, cfg, agent_id=state.agent_id)
    temporal = tca(raw, state.history, state.params, cfg) if cfg.use_tca else replace(
        raw, tag=FrameTag.ROADSIDE_TEMPORAL)
    state.history.push(raw.detached())
    return select_top(temporal, cfg.n_tx)
