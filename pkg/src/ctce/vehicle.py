"""Ego-vehicle stack: domain alignment, matching, pair fusion, motion encoding,
temporal guidance and the detection head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .assignment import gated_assignment, pairwise_distance
from .geometry import FRAME_PERIOD, Box3D, FrameTag, HistoryBuffer, Pose, QueryFrame, reframe_query_frame
from .mar import ReconstructionUnavailable, Tracker
from .model import ModelConfig
from .numerics import ParameterSet, Tensor, mha_cross_attention, mlp_forward, position_encode, sinusoidal_encode
from .numerics import tensor as T
from .roadside import generate_queries
from .scenario import Observation

POSE_TRANSLATION_SCALE = 0.1


def align(f: QueryFrame, ev_pose: Pose, params: ParameterSet, cfg: ModelConfig, unify: bool = True) -> QueryFrame:
    """Reframe ref_points into the ego frame and unify embeddings with a position code."""
    f = reframe_query_frame(f, ev_pose)
    if not unify or f.count == 0:
        return f
    pe = position_encode(f.ref_points, cfg.pos_dim_per_axis, cfg.pos_base)
    emb = mlp_forward(T.concat([f.embeddings, Tensor(pe)], axis=1), cfg.specs()["unify"], params, "ev.unify")
    return replace(f, embeddings=emb)


@dataclass
class Matching:
    pairs: np.ndarray
    unmatched_ego: np.ndarray
    unmatched_rsu: np.ndarray

    def __iter__(self):
        return iter((self.pairs, self.unmatched_ego, self.unmatched_rsu))


def match_queries(ego: QueryFrame, rsu: QueryFrame, gate: float) -> Matching:
    """Gated minimum-total-distance pairing of ego and roadside ref_points."""
    cost = pairwise_distance(ego.ref_points, rsu.ref_points)
    return Matching(*gated_assignment(cost, gate))


def fuse_pairs(ego: QueryFrame, rsu: QueryFrame, matching: Matching, params: ParameterSet,
               cfg: ModelConfig) -> QueryFrame:
    """Coarse fused set: fused pairs, then unmatched ego, then unmatched roadside queries."""
    pairs, ue, ur = matching
    parts_emb, parts_ref, parts_conf = [], [], []
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        cat = T.concat([T.take_rows(ego.embeddings, i), T.take_rows(rsu.embeddings, j)], axis=1)
        parts_emb.append(mlp_forward(cat, cfg.specs()["pair"], params, "ev.pair"))
        ci, cj = ego.confidences[i], rsu.confidences[j]
        w = np.where(ci + cj > 0, ci / np.maximum(ci + cj, 1e-12), 0.5)[:, None]
        parts_ref.append(w * ego.ref_points[i] + (1.0 - w) * rsu.ref_points[j])
        parts_conf.append(np.maximum(ci, cj))
    if len(ue):
        parts_emb.append(ego.embeddings if len(ue) == ego.count else T.take_rows(ego.embeddings, ue))
        parts_ref.append(ego.ref_points[ue])
        parts_conf.append(ego.confidences[ue])
    if len(ur):
        parts_emb.append(rsu.embeddings if len(ur) == rsu.count else T.take_rows(rsu.embeddings, ur))
        parts_ref.append(rsu.ref_points[ur])
        parts_conf.append(rsu.confidences[ur])
    if not parts_emb:
        return QueryFrame.empty(ego.agent_id, ego.frame_id, ego.sender_pose, cfg.d, FrameTag.FUSED)
    emb = parts_emb[0] if len(parts_emb) == 1 else T.concat(parts_emb, axis=0)
    return QueryFrame(ego.agent_id, ego.frame_id, ego.sender_pose, np.concatenate(parts_ref),
                      emb, np.concatenate(parts_conf), FrameTag.FUSED)


def motion_features(n: int, dt: float, pose_now: Pose, pose_then: Pose, cfg: ModelConfig) -> np.ndarray:
    rel = pose_now.inverse().compose(pose_then)
    flat = np.concatenate([rel.rotation.reshape(-1), rel.translation * POSE_TRANSLATION_SCALE])
    code = sinusoidal_encode(dt / FRAME_PERIOD, cfg.time_dim, cfg.time_base)
    return np.broadcast_to(np.concatenate([code, flat]), (n, cfg.time_dim + 12))


def motion_encode(f: QueryFrame, pose_now: Pose, pose_then: Pose, dt: float, params: ParameterSet,
                  cfg: ModelConfig) -> QueryFrame:
    """Residual update of embeddings from the frame lag and relative ego motion."""
    if f.count == 0:
        return f
    feats = motion_features(f.count, dt, pose_now, pose_then, cfg)
    return _motion_encode_rows(f, feats, params, cfg)


def _motion_encode_rows(f: QueryFrame, feats: np.ndarray, params: ParameterSet, cfg: ModelConfig) -> QueryFrame:
    delta = mlp_forward(T.concat([f.embeddings, Tensor(feats)], axis=1), cfg.specs()["motion"], params,
                        "ev.motion")
    return replace(f, embeddings=f.embeddings + delta)


def temporal_guide(coarse: QueryFrame, history: Sequence[QueryFrame], source_mode: str,
                   params: ParameterSet, cfg: ModelConfig) -> QueryFrame:
    """Residual cross-attention of coarse fused queries over concatenated history queries."""
    frames = [h for h in history if h.count]
    if source_mode == "none" or not frames or coarse.count == 0:
        return coarse
    keys = frames[0].embeddings if len(frames) == 1 else T.concat([h.embeddings for h in frames], axis=0)
    ctx = mha_cross_attention(coarse.embeddings, keys, keys, cfg.heads, params, "ev.tgf")
    return replace(coarse, embeddings=coarse.embeddings + ctx)


# -- detection head --------------------------------------------------------------
def head_outputs(f: QueryFrame, params: ParameterSet, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Class logits ``(N, C)`` and box regression ``(N, 8)``."""
    specs = cfg.specs()
    return (mlp_forward(f.embeddings, specs["cls"], params, "head.cls"),
            mlp_forward(f.embeddings, specs["reg"], params, "head.reg"))


def decode_boxes(ref_points: np.ndarray, logits: np.ndarray, reg: np.ndarray) -> list[Box3D]:
    """center = ref + offset, dims = exp(log-dims), yaw = atan2(sin, cos), score = sigmoid(best logit)."""
    boxes = []
    for k in range(len(ref_points)):
        cls = int(np.argmax(logits[k]))
        z = logits[k, cls]
        score = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
        r = reg[k]
        boxes.append(Box3D(ref_points[k] + r[:3], np.exp(r[3:6]), math.atan2(r[6], r[7]), cls, score))
    return boxes


def detect(f: QueryFrame, params: ParameterSet, cfg: ModelConfig) -> list[Box3D]:
    if f.count == 0:
        return []
    logits, reg = head_outputs(f, params, cfg)
    return decode_boxes(f.ref_points, logits.data, reg.data)


# -- per-frame ego pipeline --------------------------------------------------------
@dataclass
class EgoState:
    cfg: ModelConfig
    params: ParameterSet
    tracker: Tracker | None = None
    rsu_history: HistoryBuffer = None
    ego_history: HistoryBuffer = None
    fused_history: HistoryBuffer = None
    poses: dict = field(default_factory=dict)
    agent_id: int = 0
    reconstructed: int = 0
    unavailable: int = 0

    def __post_init__(self):
        k2 = self.cfg.k2
        self.rsu_history = self.rsu_history or HistoryBuffer(k2)
        self.ego_history = self.ego_history or HistoryBuffer(k2 if self.cfg.source_mode == "ego" else 0)
        self.fused_history = self.fused_history or HistoryBuffer(k2 if self.cfg.source_mode == "fused" else 0)
        if self.tracker is None and self.cfg.use_mar:
            self.tracker = Tracker(self.cfg)


def _guidance_frames(state: EgoState, pose_now: Pose, frame_id: int) -> list[QueryFrame]:
    """History of the selected source, aligned to the ego frame and motion-encoded for its lag."""
    cfg, params = state.cfg, state.params
    mode = cfg.source_mode
    if mode == "none":
        return []
    buf = {"roadside": state.rsu_history, "ego": state.ego_history, "fused": state.fused_history}[mode]
    frames = [f for f in buf.frames if f.count]
    if not frames:
        return []
    aligned, feats = [], []
    for f in frames:
        a = align(f, pose_now, params, cfg, unify=(mode != "fused"))
        aligned.append(a)
        pose_then = state.poses.get(f.frame_id, pose_now)
        feats.append(motion_features(a.count, (frame_id - f.frame_id) * FRAME_PERIOD, pose_now, pose_then, cfg))
    # one batched motion-encoding pass over every history row
    stacked = replace(aligned[0], ref_points=np.concatenate([a.ref_points for a in aligned]),
                      embeddings=T.concat([a.embeddings for a in aligned], axis=0) if len(aligned) > 1
                      else aligned[0].embeddings,
                      confidences=np.concatenate([a.confidences for a in aligned]))
    return [_motion_encode_rows(stacked, np.concatenate(feats), params, cfg)]


def ev_forward(ego_obs: Sequence[Observation], ego_pose: Pose, frame_id: int, received: QueryFrame | None,
               state: EgoState) -> QueryFrame:
    """Fused cooperative queries for one frame; updates histories and the tracker."""
    cfg, params = state.cfg, state.params
    state.poses[frame_id] = ego_pose
    for old in [k for k in state.poses if k < frame_id - cfg.k2 - 2]:
        del state.poses[old]

    rsu = received
    if rsu is not None and state.tracker is not None:
        state.tracker.observe(rsu)
    if rsu is None and cfg.use_mar and state.tracker is not None:
        try:
            rsu = state.tracker.reconstruct(frame_id, params)
            state.reconstructed += 1
        except ReconstructionUnavailable:
            state.unavailable += 1

    ego_raw = generate_queries(ego_obs, ego_pose, frame_id, params, cfg, prefix="ev.gen",
                               agent_id=state.agent_id, tag=FrameTag.EGO)
    ego = align(ego_raw, ego_pose, params, cfg)
    if rsu is not None and rsu.count:
        rsu_aligned = align(rsu, ego_pose, params, cfg)
        coarse = fuse_pairs(ego, rsu_aligned, match_queries(ego, rsu_aligned, cfg.gate_radius), params, cfg)
    else:
        coarse = replace(ego, tag=FrameTag.FUSED)

    history = _guidance_frames(state, ego_pose, frame_id) if cfg.use_tgf else []
    fused = temporal_guide(coarse, history, cfg.source_mode if cfg.use_tgf else "none", params, cfg)

    if rsu is not None and (rsu.tag != FrameTag.RECONSTRUCTED or state.tracker is None
                            or state.tracker.cfg.push_reconstructed):
        state.rsu_history.push(rsu.detached())
    if state.ego_history.capacity:
        state.ego_history.push(ego_raw.detached())
    if state.fused_history.capacity:
        state.fused_history.push(fused.detached())
    return fused


def ev_step(ego_obs: Sequence[Observation], ego_pose: Pose, frame_id: int, received: QueryFrame | None,
            state: EgoState) -> list[Box3D]:
    return detect(ev_forward(ego_obs, ego_pose, frame_id, received, state), state.params, state.cfg)


def individual_step(ego_obs: Sequence[Observation], ego_pose: Pose, frame_id: int, params: ParameterSet,
                    cfg: ModelConfig) -> list[Box3D]:
    """Ego-only perception: generate, align, detect."""
    ego_raw = generate_queries(ego_obs, ego_pose, frame_id, params, cfg, prefix="ev.gen", tag=FrameTag.EGO)
    return detect(align(ego_raw, ego_pose, params, cfg), params, cfg)
