"""Deterministic synthetic world with one ego vehicle and one cooperating agent.

Objects move at constant velocity with optional scheduled velocity changes.
Each agent sees objects through a range / field-of-view / occlusion model and
reports them through a noisy detection oracle that stands in for a camera
detector.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .geometry import FRAME_PERIOD, Box3D, Pose, wrap_yaw

CLASS_NAMES = ("car", "pedestrian", "cyclist")

# nominal (length, width, height) and speed range (m/s) per class
CLASS_DIMS = {0: (4.5, 1.9, 1.5), 1: (0.7, 0.7, 1.75), 2: (1.8, 0.7, 1.7)}
CLASS_SPEED = {0: (3.0, 11.0), 1: (0.5, 1.8), 2: (2.0, 6.0)}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    pos_sigma: tuple[float, float, float] = (0.3, 0.3, 0.1)
    dims_sigma: float = 0.1
    yaw_sigma: float = 0.1
    conf_sigma: float = 0.05
    miss_rate: float = 0.1
    fp_rate: float = 0.3
    max_fp: int = 4

    def validate(self) -> None:
        if min(self.pos_sigma) < 0 or self.dims_sigma < 0 or self.yaw_sigma < 0 or self.conf_sigma < 0:
            raise ScenarioError("noise sigmas must be non-negative")
        if not (0 <= self.miss_rate <= 1 and 0 <= self.fp_rate <= 1):
            raise ScenarioError("miss_rate and fp_rate must lie in [0, 1]")
        if self.max_fp < 0:
            raise ScenarioError("max_fp must be non-negative")


@dataclass(frozen=True)
class SensorSpec:
    max_range: float
    fov_half_angle: float
    height: float
    occlusion: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    n_frames: int = 20
    n_objects: tuple[int, int] = (18, 30)
    class_probs: tuple[float, float, float] = (0.6, 0.2, 0.2)
    spawn_x: tuple[float, float] = (-55.0, 55.0)
    spawn_y: tuple[float, float] = (-45.0, 45.0)
    late_spawn_prob: float = 0.15
    velocity_change_prob: float = 0.1
    # ego vehicle
    ego_speed: tuple[float, float] = (5.0, 10.0)
    ego_start_x: tuple[float, float] = (-15.0, 0.0)
    ego_heading_sigma: float = 0.05
    ego_sensor: SensorSpec = SensorSpec(max_range=45.0, fov_half_angle=math.radians(60), height=1.6)
    ego_range: float = 51.2
    ego_noise: NoiseModel = NoiseModel()
    # cooperating agent; kind "roadside" is stationary and elevated, "ego" is a second vehicle
    coop_kind: str = "roadside"
    roadside_position: tuple[float, float, float] = (5.0, 28.0, 7.0)
    roadside_yaw: float = -math.pi / 2
    roadside_sensor: SensorSpec = SensorSpec(max_range=75.0, fov_half_angle=math.radians(80), height=7.0)
    roadside_noise: NoiseModel = NoiseModel(pos_sigma=(0.1, 0.1, 0.05), dims_sigma=0.05, yaw_sigma=0.05,
                                            miss_rate=0.1, fp_rate=0.3, max_fp=4)
    seed: int = 0

    def validate(self) -> None:
        if self.n_frames <= 0:
            raise ScenarioError("n_frames must be positive")
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ScenarioError("n_objects must be an ordered non-negative range")
        if abs(sum(self.class_probs) - 1.0) > 1e-9 or min(self.class_probs) < 0:
            raise ScenarioError("class_probs must be a probability vector")
        if not (0 <= self.late_spawn_prob <= 1 and 0 <= self.velocity_change_prob <= 1):
            raise ScenarioError("probabilities must lie in [0, 1]")
        if self.coop_kind not in ("roadside", "ego"):
            raise ScenarioError(f"unknown cooperator kind {self.coop_kind!r}")
        if self.ego_range <= 0:
            raise ScenarioError("ego_range must be positive")
        self.ego_noise.validate()
        self.roadside_noise.validate()

    # -- structured text round trip --------------------------------------
    def to_dict(self) -> dict:
        return _to_plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d.pop(f.name)
            if f.name in ("ego_noise", "roadside_noise"):
                v = NoiseModel(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()})
            elif f.name in ("ego_sensor", "roadside_sensor"):
                v = SensorSpec(**v)
            elif isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
        if d:
            raise ScenarioError(f"unknown scenario keys: {sorted(d)}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    with open(path) as fh:
        return ScenarioConfig.from_dict(yaml.safe_load(fh) or {})


def save_scenario_config(cfg: ScenarioConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# -- world objects --------------------------------------------------------
@dataclass(frozen=True)
class ObjectTrack:
    object_id: int
    class_id: int
    dims: tuple[float, float, float]
    spawn: int
    despawn: int
    center0: tuple[float, float, float]
    velocity: tuple[float, float, float]
    velocity_changes: tuple[tuple[int, tuple[float, float, float]], ...] = ()
    yaw0: float = 0.0

    def __post_init__(self):
        if self.despawn <= self.spawn:
            raise ScenarioError("despawn must come after spawn")
        if min(self.dims) <= 0:
            raise ScenarioError("object dims must be positive")

    def velocity_at(self, frame_id: int) -> np.ndarray:
        v = np.asarray(self.velocity, dtype=np.float64)
        for f, nv in self.velocity_changes:
            if f <= frame_id:
                v = np.asarray(nv, dtype=np.float64)
        return v

    def alive(self, frame_id: int) -> bool:
        return self.spawn <= frame_id < self.despawn

    def center_at(self, frame_id: int) -> np.ndarray:
        c = np.asarray(self.center0, dtype=np.float64).copy()
        for k in range(self.spawn, frame_id):
            c += self.velocity_at(k) * FRAME_PERIOD
        return c

    def yaw_at(self, frame_id: int) -> float:
        v = self.velocity_at(frame_id)
        if math.hypot(v[0], v[1]) < 0.1:
            return wrap_yaw(self.yaw0)
        return math.atan2(v[1], v[0])

    def box_at(self, frame_id: int) -> Box3D:
        return Box3D(self.center_at(frame_id), self.dims, self.yaw_at(frame_id), self.class_id, 1.0)

    def is_constant_velocity(self) -> bool:
        return not self.velocity_changes


@dataclass(frozen=True, eq=False)
class AgentSpec:
    agent_id: int
    kind: str
    poses: tuple[Pose, ...]
    sensor: SensorSpec

    def pose_at(self, frame_id: int) -> Pose:
        return self.poses[frame_id]


@dataclass(frozen=True, eq=False)
class Scenario:
    config: ScenarioConfig
    tracks: tuple[ObjectTrack, ...]
    ego: AgentSpec
    coop: AgentSpec

    @property
    def agents(self) -> tuple[AgentSpec, AgentSpec]:
        return self.ego, self.coop

    @property
    def n_frames(self) -> int:
        return self.config.n_frames


@dataclass(frozen=True, eq=False)
class Observation:
    box: Box3D
    object_id: int
    confidence: float


EGO_ID = 0
COOP_ID = 1


def _sample_class(rng: np.random.Generator, probs) -> int:
    return int(rng.choice(len(probs), p=np.asarray(probs)))


def _class_dims(rng: np.random.Generator, cls: int) -> tuple[float, float, float]:
    base = np.asarray(CLASS_DIMS[cls])
    return tuple(float(x) for x in base * (1.0 + rng.uniform(-0.03, 0.03, size=3)))


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Build objects and agent pose tracks from ``cfg`` (pure function of the config)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x5CE7])
    n_obj = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    tracks = []
    for oid in range(n_obj):
        cls = _sample_class(rng, cfg.class_probs)
        dims = _class_dims(rng, cls)
        spawn = 0
        if rng.random() < cfg.late_spawn_prob and cfg.n_frames > 1:
            spawn = int(rng.integers(1, cfg.n_frames))
        despawn = cfg.n_frames
        if rng.random() < cfg.late_spawn_prob and despawn - spawn > 1:
            despawn = int(rng.integers(spawn + 1, cfg.n_frames + 1))
        heading = rng.uniform(-math.pi, math.pi)
        if cls == 0 and rng.random() < 0.6:
            heading = float(rng.choice([0.0, math.pi, math.pi / 2, -math.pi / 2])) + rng.normal(0, 0.05)
        speed = rng.uniform(*CLASS_SPEED[cls])
        if rng.random() < 0.15:
            speed = 0.0
        vel = (speed * math.cos(heading), speed * math.sin(heading), 0.0)
        center = (rng.uniform(*cfg.spawn_x), rng.uniform(*cfg.spawn_y), dims[2] / 2.0)
        changes = ()
        if cfg.n_frames > 2 and rng.random() < cfg.velocity_change_prob:
            f = int(rng.integers(spawn + 1, max(spawn + 2, cfg.n_frames)))
            new_heading = heading + rng.uniform(-0.8, 0.8)
            new_speed = max(0.0, speed + rng.uniform(-3.0, 3.0))
            changes = ((f, (new_speed * math.cos(new_heading), new_speed * math.sin(new_heading), 0.0)),)
        tracks.append(ObjectTrack(oid, cls, dims, spawn, despawn, center, vel, changes, heading))

    ego = _moving_agent(rng, cfg, EGO_ID, lane_y=0.0)
    if cfg.coop_kind == "roadside":
        pose = Pose.from_yaw(cfg.roadside_yaw, cfg.roadside_position)
        coop = AgentSpec(COOP_ID, "roadside", tuple([pose] * cfg.n_frames), cfg.roadside_sensor)
    else:
        coop = _moving_agent(rng, cfg, COOP_ID, lane_y=-4.0, sensor=replace(cfg.ego_sensor))
    return Scenario(cfg, tuple(tracks), ego, coop)


def _moving_agent(rng, cfg: ScenarioConfig, agent_id: int, lane_y: float, sensor=None) -> AgentSpec:
    sensor = sensor or cfg.ego_sensor
    speed = rng.uniform(*cfg.ego_speed)
    heading = rng.normal(0.0, cfg.ego_heading_sigma)
    x0 = rng.uniform(*cfg.ego_start_x)
    poses = []
    for f in range(cfg.n_frames):
        t = f * FRAME_PERIOD
        pos = (x0 + speed * t * math.cos(heading), lane_y + speed * t * math.sin(heading), sensor.height)
        poses.append(Pose.from_yaw(heading, pos))
    return AgentSpec(agent_id, "ego", tuple(poses), sensor)


def ground_truth_at(tracks: Iterable[ObjectTrack], frame_id: int) -> list[Box3D]:
    return [t.box_at(frame_id) for t in tracks if t.alive(frame_id)]


def ground_truth_ids_at(tracks: Iterable[ObjectTrack], frame_id: int) -> list[int]:
    return [t.object_id for t in tracks if t.alive(frame_id)]


# -- sensing ----------------------------------------------------------------
def _polar(agent: AgentSpec, boxes: Sequence[Box3D], frame_id: int):
    pose = agent.pose_at(frame_id)
    if not boxes:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0)
    local = pose.inverse().apply(np.stack([b.center for b in boxes]))
    rng_ = np.hypot(local[:, 0], local[:, 1])
    bearing = np.arctan2(local[:, 1], local[:, 0])
    return local, rng_, bearing


def in_coverage(agent: AgentSpec, boxes: Sequence[Box3D], frame_id: int) -> np.ndarray:
    """Range and field-of-view test only (no occlusion)."""
    _, r, bearing = _polar(agent, boxes, frame_id)
    return (r <= agent.sensor.max_range) & (np.abs(bearing) <= agent.sensor.fov_half_angle)


AIM_CLEARANCE = 0.5
CONTACT_GAP = 1.0


def visible_mask(agent: AgentSpec, boxes: Sequence[Box3D], frame_id: int) -> np.ndarray:
    """Boolean visibility per box.

    A box is occluded when a nearer box covers the bearing of its center
    (angular footprint of radius ``(l + w) / 4``) and that box's top is
    above the sight line from the sensor to the occluded box's aim point.
    The aim point is the box top, capped ``AIM_CLEARANCE`` below the sensor,
    so low sensors look at the body of a target and elevated ones at its roof.
    Boxes whose footprints come within ``CONTACT_GAP`` of each other never
    occlude one another (the simulator does not resolve interpenetration).
    """
    local, r, bearing = _polar(agent, boxes, frame_id)
    mask = (r <= agent.sensor.max_range) & (np.abs(bearing) <= agent.sensor.fov_half_angle)
    if not agent.sensor.occlusion or len(boxes) < 2:
        return mask
    h_sensor = agent.sensor.height
    radius = np.array([0.25 * (b.dims[0] + b.dims[1]) for b in boxes])
    top = np.array([b.center[2] + b.dims[2] / 2.0 for b in boxes])
    aim = np.minimum(top, h_sensor - AIM_CLEARANCE)
    half_width = np.arctan2(radius, np.maximum(r, 1e-6))
    xy = np.stack([b.center[:2] for b in boxes])
    out = mask.copy()
    for j in np.flatnonzero(mask):
        for i in range(len(boxes)):
            if i == j or r[i] >= r[j] or r[i] <= radius[i]:
                continue
            dtheta = abs(math.remainder(bearing[j] - bearing[i], 2 * math.pi))
            if dtheta > half_width[i]:
                continue
            if np.hypot(*(xy[i] - xy[j])) - radius[i] - radius[j] < CONTACT_GAP:
                continue
            sight = h_sensor + (aim[j] - h_sensor) * (r[i] / r[j])
            if sight < top[i]:
                out[j] = False
                break
    return out


def visible_objects(agent: AgentSpec, boxes: Sequence[Box3D], frame_id: int) -> list[Box3D]:
    m = visible_mask(agent, boxes, frame_id)
    return [b for b, v in zip(boxes, m) if v]


def confidence_law(r: np.ndarray, max_range: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, sigma, size=np.shape(r)) if sigma > 0 else np.zeros(np.shape(r))
    return np.clip(1.0 - np.asarray(r) / max_range + noise, 0.0, 1.0)


def oracle_detect(agent: AgentSpec, boxes: Sequence[Box3D], noise: NoiseModel, rng: np.random.Generator,
                  frame_id: int, object_ids: Sequence[int] | None = None,
                  class_probs=(0.6, 0.2, 0.2)) -> list[Observation]:
    """Noisy detections, in the agent's sensor frame, of boxes already known to be visible."""
    pose = agent.pose_at(frame_id)
    inv = pose.inverse()
    if object_ids is None:
        object_ids = list(range(len(boxes)))
    obs: list[Observation] = []
    sigma = np.asarray(noise.pos_sigma, dtype=np.float64)
    for b, oid in zip(boxes, object_ids):
        if rng.random() < noise.miss_rate:
            continue
        local = b.transformed(inv)
        center = local.center + rng.normal(0.0, 1.0, size=3) * sigma
        dims = np.maximum(local.dims + rng.normal(0.0, noise.dims_sigma, size=3), 0.1)
        yaw = local.yaw + rng.normal(0.0, noise.yaw_sigma)
        r = math.hypot(local.center[0], local.center[1])
        conf = float(confidence_law(np.array(r), agent.sensor.max_range, noise.conf_sigma, rng))
        obs.append(Observation(Box3D(center, dims, yaw, b.class_id, conf), int(oid), conf))
    n_fp = int(rng.binomial(noise.max_fp, noise.fp_rate)) if noise.max_fp else 0
    for _ in range(n_fp):
        r = agent.sensor.max_range * math.sqrt(rng.uniform(0.02, 1.0))
        bearing = rng.uniform(-agent.sensor.fov_half_angle, agent.sensor.fov_half_angle)
        cls = _sample_class(rng, class_probs)
        dims = np.asarray(_class_dims(rng, cls))
        # ground-level object seen from the sensor
        center = np.array([r * math.cos(bearing), r * math.sin(bearing), dims[2] / 2.0 - pose.translation[2]])
        conf = float(confidence_law(np.array(r), agent.sensor.max_range, noise.conf_sigma, rng))
        obs.append(Observation(Box3D(center, dims, rng.uniform(-math.pi, math.pi), cls, conf), -1, conf))
    return obs


def frame_rng(seed: int, agent_id: int, frame_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x0B5, agent_id, frame_id])


def observe(scenario: Scenario, agent: AgentSpec, frame_id: int) -> list[Observation]:
    """Visible-object detections for one agent and frame, seeded by (seed, agent, frame)."""
    cfg = scenario.config
    alive = [t for t in scenario.tracks if t.alive(frame_id)]
    boxes = [t.box_at(frame_id) for t in alive]
    mask = visible_mask(agent, boxes, frame_id)
    vis = [b for b, m in zip(boxes, mask) if m]
    ids = [t.object_id for t, m in zip(alive, mask) if m]
    noise = cfg.ego_noise if agent.agent_id == EGO_ID or agent.kind == "ego" else cfg.roadside_noise
    return oracle_detect(agent, vis, noise, frame_rng(cfg.seed, agent.agent_id, frame_id), frame_id, ids,
                         cfg.class_probs)


def evaluation_targets(scenario: Scenario, frame_id: int) -> list[Box3D]:
    """Cooperative ground truth in the ego frame.

    Objects inside the ego's square range that lie in at least one agent's
    sensor coverage (range and field of view).
    """
    boxes = ground_truth_at(scenario.tracks, frame_id)
    if not boxes:
        return []
    covered = in_coverage(scenario.ego, boxes, frame_id) | in_coverage(scenario.coop, boxes, frame_id)
    inv = scenario.ego.pose_at(frame_id).inverse()
    lim = scenario.config.ego_range
    out = []
    for b, c in zip(boxes, covered):
        if not c:
            continue
        local = b.transformed(inv)
        if abs(local.center[0]) <= lim and abs(local.center[1]) <= lim:
            out.append(local)
    return out


# -- replay log ------------------------------------------------------------
def write_replay(scenario: Scenario, path: str | Path) -> None:
    """JSON-lines log of every agent's observations, one frame per line."""
    with open(path, "w") as fh:
        for f in range(scenario.n_frames):
            rec = {"frame_id": f, "agents": {}}
            for agent in scenario.agents:
                obs = observe(scenario, agent, f)
                rec["agents"][str(agent.agent_id)] = {
                    "kind": agent.kind,
                    "pose": agent.pose_at(f).flat().tolist(),
                    "observations": [dict(o.box.to_dict(), object_id=o.object_id, confidence=o.confidence)
                                     for o in obs],
                }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_replay(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def scene_configs(base: ScenarioConfig, n: int, seed: int) -> list[ScenarioConfig]:
    """``n`` per-scene configs with seeds derived from ``seed``."""
    ss = np.random.SeedSequence([seed, 0x5CE])
    return [replace(base, seed=int(child.generate_state(1)[0])) for child in ss.spawn(n)]
