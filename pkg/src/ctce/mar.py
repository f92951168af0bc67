"""Motion-aware reconstruction of lost roadside query frames.

Received roadside queries are tracked in world coordinates with a
constant-velocity Kalman filter.  When a frame is lost, confirmed tracks are
propagated to the missing timestamp and their embeddings are forecast by
cross-attention over the track's embedding history with sinusoidal time codes.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .assignment import gated_assignment, pairwise_distance
from .geometry import FRAME_PERIOD, FrameTag, Pose, QueryFrame, frame_time
from .model import ModelConfig
from .numerics import ParameterSet, Tensor, mha_cross_attention, sinusoidal_encode
from .numerics import tensor as T

H = np.hstack([np.eye(3), np.zeros((3, 3))])


class NumericalError(ArithmeticError):
    pass


class ReconstructionUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class KalmanConfig:
    q: float = 1.0
    r: float = 0.25
    init_vel_var: float = 25.0

    def __post_init__(self):
        if self.q <= 0 or self.r <= 0 or self.init_vel_var <= 0:
            raise ValueError("Kalman noise parameters must be positive")


@dataclass(frozen=True)
class TrackerConfig:
    gate: float = 2.0
    min_hits: int = 2
    max_misses: int = 3
    conf_decay: float = 0.9
    push_reconstructed: bool = True

    def __post_init__(self):
        if self.gate <= 0 or self.min_hits <= 0 or self.max_misses <= 0:
            raise ValueError("tracker gate, min_hits and max_misses must be positive")


@dataclass
class TrackState:
    state: np.ndarray
    covariance: np.ndarray
    embedding: np.ndarray
    track_id: int = 0
    hits: int = 1
    misses: int = 0
    time: float = 0.0
    last_update: float = 0.0
    confidence: float = 1.0
    emb_history: deque = field(default_factory=deque)

    @property
    def position(self) -> np.ndarray:
        return self.state[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[3:]


def transition(dt: float) -> np.ndarray:
    F = np.eye(6)
    F[:3, 3:] = dt * np.eye(3)
    return F


def process_noise(dt: float, q: float) -> np.ndarray:
    """Exact discretisation of continuous white-noise acceleration, per axis."""
    Q = np.zeros((6, 6))
    Q[:3, :3] = q * dt ** 3 / 3.0 * np.eye(3)
    Q[:3, 3:] = Q[3:, :3] = q * dt ** 2 / 2.0 * np.eye(3)
    Q[3:, 3:] = q * dt * np.eye(3)
    return Q


def kf_predict(t: TrackState, dt: float, cfg: KalmanConfig = KalmanConfig()) -> TrackState:
    if dt <= 0:
        raise ValueError("predict needs dt > 0")
    F = transition(dt)
    P = F @ t.covariance @ F.T + process_noise(dt, cfg.q)
    return replace(t, state=F @ t.state, covariance=0.5 * (P + P.T), time=t.time + dt)


def _check_pd(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance lost positive definiteness") from exc
    return P


def kf_update(t: TrackState, z, cfg: KalmanConfig = KalmanConfig()) -> TrackState:
    """Position-only measurement update (Joseph form)."""
    z = np.asarray(z, dtype=np.float64).reshape(3)
    P = _check_pd(t.covariance)
    R = cfg.r * np.eye(3)
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    x = t.state + K @ (z - H @ t.state)
    IKH = np.eye(6) - K @ H
    P = IKH @ P @ IKH.T + K @ R @ K.T
    return replace(t, state=x, covariance=_check_pd(P))


def new_track(z, embedding, confidence: float, time: float, track_id: int,
              cfg: KalmanConfig = KalmanConfig(), history: int = 4) -> TrackState:
    P = np.diag([cfg.r] * 3 + [cfg.init_vel_var] * 3)
    emb = np.asarray(embedding, dtype=np.float64)
    hist = deque([(time, emb)], maxlen=max(history, 1))
    return TrackState(np.concatenate([np.asarray(z, dtype=np.float64), np.zeros(3)]), P, emb,
                      track_id, 1, 0, time, time, float(confidence), hist)


def associate(tracks: Sequence[TrackState], points: np.ndarray, gate: float):
    """Gated minimum-distance assignment of predicted track positions to query points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not tracks:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), np.arange(len(points))
    cost = pairwise_distance(np.stack([t.position for t in tracks]), points)
    return gated_assignment(cost, gate)


def manage(tracks: list[TrackState], pairs, unmatched_tracks, unmatched_queries, points, embeddings,
           confidences, time: float, cfg: TrackerConfig, kcfg: KalmanConfig, next_id,
           history: int) -> list[TrackState]:
    """Update matched tracks, age unmatched ones, spawn tracks for new queries."""
    out: list[TrackState] = []
    matched = {int(i): int(j) for i, j in pairs}
    for i, t in enumerate(tracks):
        if i in matched:
            j = matched[i]
            t = kf_update(t, points[j], kcfg)
            hist = deque(t.emb_history, maxlen=t.emb_history.maxlen)
            hist.append((time, np.asarray(embeddings[j], dtype=np.float64)))
            out.append(replace(t, embedding=hist[-1][1], hits=t.hits + 1, misses=0, last_update=time,
                               confidence=float(confidences[j]), emb_history=hist))
        else:
            t = replace(t, misses=t.misses + 1)
            if t.misses <= cfg.max_misses:
                out.append(t)
    for j in unmatched_queries:
        out.append(new_track(points[j], embeddings[j], confidences[j], time, next(next_id), kcfg, history))
    return out


# -- embedding forecast -------------------------------------------------------------
def time_codes(lags: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Sinusoidal code of time offsets measured in frames."""
    return sinusoidal_encode(np.asarray(lags, dtype=np.float64), cfg.d, cfg.time_base)


def forecast_inputs(histories: Sequence[Sequence[tuple[float, np.ndarray]]], target_time: float,
                    cfg: ModelConfig):
    """Padded key tensor ``(B, L, d)`` (embedding + time code) and padding mask ``(B, L)``."""
    if not histories or any(len(h) == 0 for h in histories):
        raise ReconstructionUnavailable("embedding forecast needs at least one history frame per track")
    L = max(len(h) for h in histories)
    B = len(histories)
    keys = np.zeros((B, L, cfg.d))
    mask = np.ones((B, L), dtype=bool)
    for b, hist in enumerate(histories):
        times = np.array([t for t, _ in hist])
        emb = np.stack([e for _, e in hist])
        lags = (times - target_time) / FRAME_PERIOD
        keys[b, :len(hist)] = emb + time_codes(lags, cfg)
        mask[b, :len(hist)] = False
    return keys, mask


def predict_embeddings(histories: Sequence[Sequence[tuple[float, np.ndarray]]], target_time: float,
                       params: ParameterSet, cfg: ModelConfig, prefix: str = "mar.pred") -> Tensor:
    """Forecast one embedding per track; the query is the time code of the target (lag 0)."""
    keys, mask = forecast_inputs(histories, target_time, cfg)
    q = np.broadcast_to(time_codes(np.zeros(1), cfg), (len(histories), 1, cfg.d))
    out = mha_cross_attention(q, keys, keys, cfg.heads, params, prefix, key_mask=mask)
    return out.reshape(len(histories), cfg.d)


def copy_last_embeddings(histories) -> np.ndarray:
    return np.stack([h[-1][1] for h in histories])


# -- tracker ------------------------------------------------------------------------
class Tracker:
    """Tracks received roadside queries across frames (world coordinates)."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrackerConfig = TrackerConfig(),
                 kcfg: KalmanConfig = KalmanConfig()):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.kcfg = kcfg
        self.tracks: list[TrackState] = []
        self.sender_pose: Pose | None = None
        self.agent_id = 1
        self._ids = itertools.count()
        self.log: list[dict] = []

    @property
    def history(self) -> int:
        return max(self.model_cfg.k2, 1)

    def _advance(self, time: float) -> None:
        out = []
        for t in self.tracks:
            dt = time - t.time
            out.append(kf_predict(t, dt, self.kcfg) if dt > 1e-12 else t)
        self.tracks = out

    def observe(self, frame: QueryFrame) -> None:
        """Predict, associate, update and manage with a received frame."""
        time = frame.timestamp
        self._advance(time)
        points = frame.world_points()
        pairs, ut, uq = associate(self.tracks, points, self.cfg.gate)
        for i, j in pairs:
            self.log.append({"track_id": self.tracks[i].track_id, "frame_id": frame.frame_id,
                             "state": self.tracks[i].state.tolist(), "query": int(j)})
        self.tracks = manage(self.tracks, pairs, ut, uq, points, frame.embeddings.data, frame.confidences,
                             time, self.cfg, self.kcfg, self._ids, self.history)
        self.sender_pose = frame.sender_pose
        self.agent_id = frame.agent_id

    def candidates(self) -> list[TrackState]:
        """Confirmed tracks that were matched in the last received frame."""
        return [t for t in self.tracks if t.hits >= self.cfg.min_hits and t.misses == 0]

    def reconstruct(self, frame_id: int, params: ParameterSet) -> QueryFrame:
        """Synthesise the lost frame ``frame_id`` from confirmed tracks.

        Track states are advanced in place, so consecutive losses chain
        predictions without an update in between.
        """
        cands = self.candidates()
        if not cands or self.sender_pose is None:
            raise ReconstructionUnavailable("no confirmed tracks")
        time = frame_time(frame_id)
        self._advance(time)
        cands = self.candidates()
        world = np.stack([t.position for t in cands])
        emb = predict_embeddings([list(t.emb_history) for t in cands], time, params, self.model_cfg)
        gaps = np.array([round((time - t.last_update) / FRAME_PERIOD) for t in cands])
        conf = np.array([t.confidence for t in cands]) * self.cfg.conf_decay ** gaps
        local = self.sender_pose.inverse().apply(world)
        return QueryFrame(self.agent_id, frame_id, self.sender_pose, local, emb, conf, FrameTag.RECONSTRUCTED)
