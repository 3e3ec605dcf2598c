"""Synthetic two-agent traffic scenes and an emulated query-based detector.

The simulator produces ground-truth tracks in a world frame, a moving ego
vehicle and a static roadside unit. ``observe`` turns the scene into noisy
per-agent detections carrying a latent feature vector; each agent's latent
space is distorted by its own affine domain operator so that the
cooperative alignment has a real gap to undo.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BOX_DIM, THETA, VX, VY, Pose, corners_bev, normalize_angle, transform_boxes
from .numerics import ConfigurationError, Linear, ParamStore, hungarian

CLASSES = ("car", "pedestrian", "cyclist")
# mean (w, l, h) per class and log-normal spread
CLASS_DIMS = {0: (1.9, 4.5, 1.6), 1: (0.7, 0.7, 1.75), 2: (0.7, 1.8, 1.6)}
DIM_SPREAD = 0.12
EMBED_SEED = 20240917
DOMAIN_SEED = 7321
VEHICLE_RANGE = (-51.2, 51.2, -51.2, 51.2)
INFRA_RANGE = (0.0, 102.4, -51.2, 51.2)
HEIGHT_RANGE = (-5.0, 3.0)


@dataclass
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float
    vx: float = 0.0
    vy: float = 0.0
    class_label: int = 0
    score: float = 1.0

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise ValueError("box dimensions must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        self.theta = normalize_angle(self.theta)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta, self.vx, self.vy])

    @classmethod
    def from_array(cls, arr, class_label: int = 0, score: float = 1.0) -> "Box3D":
        a = [float(v) for v in arr]
        return cls(*a, class_label=int(class_label), score=float(np.clip(score, 0.0, 1.0)))


@dataclass
class ObjectSpec:
    """Explicit initial state for one simulated object (world frame)."""

    x: float
    y: float
    heading: float = 0.0
    speed: float = 0.0
    class_label: int = 0
    dims: tuple | None = None
    yaw_rate: float = 0.0
    turn_start: int = 0
    turn_frames: int = 10**9


@dataclass
class AgentConfig:
    kind: str = "vehicle"
    horizontal_range: tuple = VEHICLE_RANGE
    height_range: tuple = HEIGHT_RANGE
    fov: float = 2 * math.pi
    occlusion: bool = True
    occlusion_fraction: float = 0.6
    sigma_pos: float = 0.5
    sigma_dim: float = 0.05
    sigma_yaw: float = 0.1
    sigma_vel: float = 0.5
    miss_rate: float = 0.1
    clutter_rate: float = 0.1
    true_score: tuple = (0.75, 0.12)
    clutter_score: tuple = (0.45, 0.15)
    domain_gap: bool = True
    domain_block: int = 8
    D: np.ndarray | None = field(default=None, repr=False)
    e: np.ndarray | None = field(default=None, repr=False)
    poses: list = field(default_factory=list, repr=False)

    def validate(self):
        x0, x1, y0, y1 = self.horizontal_range
        if not (x0 < x1 and y0 < y1 and self.height_range[0] < self.height_range[1]):
            raise ConfigurationError(f"{self.kind}: ranges must be ordered (min < max)")
        if not (0 <= self.miss_rate < 1 and 0 <= self.clutter_rate):
            raise ConfigurationError(f"{self.kind}: miss rate must lie in [0, 1)")
        return self

    def params(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("D", "e", "poses"):
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_params(cls, params: dict) -> "AgentConfig":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in params.items()}
        return cls(**kw)


def default_vehicle(**kw) -> AgentConfig:
    base = dict(kind="vehicle", horizontal_range=VEHICLE_RANGE, fov=2 * math.pi / 3, occlusion=True)
    base.update(kw)
    return AgentConfig(**base)


def default_infra(**kw) -> AgentConfig:
    base = dict(kind="infrastructure", horizontal_range=INFRA_RANGE, fov=math.pi, occlusion=False)
    base.update(kw)
    return AgentConfig(**base)


@dataclass
class ScenarioSpec:
    n_frames: int = 100
    rate_hz: float = 10.0
    n_objects: int = 28
    feature_dim: int = 32
    objects: list | None = None
    ego_start: tuple = (-25.0, -1.75, 0.0)
    ego_speed: float = 5.0
    infra_pose: tuple = (-20.0, -12.0, 0.35)
    jitter: bool = True
    vehicle: AgentConfig = field(default_factory=default_vehicle)
    infra: AgentConfig = field(default_factory=default_infra)

    def validate(self):
        if self.n_frames <= 0:
            raise ConfigurationError("scenario needs at least one frame")
        if self.rate_hz <= 0:
            raise ConfigurationError("frame rate must be positive")
        self.vehicle.validate()
        self.infra.validate()
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["vehicle"] = self.vehicle.params()
        d["infra"] = self.infra.params()
        d["objects"] = None if self.objects is None else [dataclasses.asdict(o) for o in self.objects]
        d["ego_start"] = list(self.ego_start)
        d["infra_pose"] = list(self.infra_pose)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d["vehicle"] = AgentConfig.from_params(d["vehicle"])
        d["infra"] = AgentConfig.from_params(d["infra"])
        if d.get("objects") is not None:
            d["objects"] = [ObjectSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in o.items()})
                            for o in d["objects"]]
        d["ego_start"] = tuple(d["ego_start"])
        d["infra_pose"] = tuple(d["infra_pose"])
        return cls(**d)


@dataclass
class GroundTruthTrack:
    track_id: int
    class_label: int
    boxes: np.ndarray  # (T, 9) world frame


@dataclass
class Scenario:
    spec: ScenarioSpec
    seed: int
    tracks: list
    vehicle: AgentConfig
    infra: AgentConfig
    rel_poses: list  # vehicle <- infrastructure, per frame

    @property
    def n_frames(self) -> int:
        return self.spec.n_frames

    @property
    def dt(self) -> float:
        return 1.0 / self.spec.rate_hz

    def agent(self, kind: str) -> AgentConfig:
        return self.vehicle if kind.startswith("veh") else self.infra

    def world_boxes(self, t: int):
        """(boxes (N, 9), labels (N,), ids (N,)) of every object at frame t."""
        if not self.tracks:
            return np.zeros((0, BOX_DIM)), np.zeros(0, int), np.zeros(0, int)
        boxes = np.stack([tr.boxes[t] for tr in self.tracks])
        labels = np.array([tr.class_label for tr in self.tracks])
        ids = np.array([tr.track_id for tr in self.tracks])
        return boxes, labels, ids

    def ego_motion(self, t: int) -> Pose:
        """Maps vehicle-frame points at frame t into the vehicle frame at t + 1."""
        poses = self.vehicle.poses
        nxt = poses[min(t + 1, len(poses) - 1)]
        return nxt.inverse().compose(poses[t])


@dataclass
class Detections:
    boxes: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    latents: np.ndarray
    gt_ids: np.ndarray  # -1 for clutter

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def empty(cls, d: int) -> "Detections":
        return cls(np.zeros((0, BOX_DIM)), np.zeros(0, int), np.zeros(0), np.zeros((0, d)), np.zeros(0, int))


# --------------------------------------------------------------------------
# appearance embedding and domain operators


class ObjectEmbedder:
    """Deterministic class/size/heading embedding shared by every agent.

    Heading lands in dims 0-1 as (cos, sin) so that a change of frame acts
    inside the first block only.
    """

    def __init__(self, d: int, seed: int = EMBED_SEED):
        rng = np.random.default_rng(seed)
        self.d = d
        self.P = rng.normal(0.0, 1.0 / math.sqrt(3.0), size=(d - 2, 6))
        self.c = rng.normal(0.0, 0.3, size=d - 2)

    def __call__(self, labels, dims, headings) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        n = len(labels)
        if n == 0:
            return np.zeros((0, self.d))
        dims = np.asarray(dims, dtype=np.float64).reshape(n, 3)
        attrs = np.zeros((n, 6))
        attrs[np.arange(n), labels] = 1.0
        attrs[:, 3] = (dims[:, 0] - 1.5) / 0.6
        attrs[:, 4] = (dims[:, 1] - 3.0) / 1.5
        attrs[:, 5] = (dims[:, 2] - 1.6) / 0.2
        head = np.stack([np.cos(headings), np.sin(headings)], axis=1) * 1.5
        return np.concatenate([head, np.tanh(attrs @ self.P.T + self.c)], axis=1)


def sample_domain_operator(d: int, block: int, rng: np.random.Generator, max_cond: float = 5.0):
    """Block-diagonal well-conditioned D (cond < max_cond) and small offset e."""
    if d % block:
        raise ConfigurationError(f"domain block {block} does not divide d={d}")
    D = np.zeros((d, d))
    lo = 1.0 / math.sqrt(max_cond) * 1.05
    hi = math.sqrt(max_cond) / 1.05
    for b in range(d // block):
        Q1, _ = np.linalg.qr(rng.normal(size=(block, block)))
        Q2, _ = np.linalg.qr(rng.normal(size=(block, block)))
        s = rng.uniform(max(lo, 0.6), min(hi, 1.5), size=block)
        D[b * block:(b + 1) * block, b * block:(b + 1) * block] = Q1 @ np.diag(s) @ Q2
    e = rng.normal(0.0, 0.1, size=d)
    return D, e


# --------------------------------------------------------------------------
# scenario generation


def _random_objects(rng: np.random.Generator, n: int, n_frames: int, dt: float) -> list[ObjectSpec]:
    objs: list[ObjectSpec] = []
    lanes = [  # (axis, offset, heading)
        ("x", -1.75, 0.0), ("x", 1.75, math.pi), ("x", -5.25, 0.0), ("x", 5.25, math.pi),
        ("y", 1.75, math.pi / 2), ("y", -1.75, -math.pi / 2),
    ]
    placed: list[tuple[float, float]] = []

    def free(x, y, gap):
        return all((x - px) ** 2 + (y - py) ** 2 > gap ** 2 for px, py in placed)

    tries = 0
    while len(objs) < n and tries < 50 * n:
        tries += 1
        kind = rng.random()
        if kind < 0.55:  # moving car in a lane
            axis, off, heading = lanes[rng.integers(len(lanes))]
            s = rng.uniform(-70, 70)
            x, y = (s, off) if axis == "x" else (off, s)
            speed = rng.uniform(3.0, 10.0)
            label = 0
            yaw_rate, t0, nt = 0.0, 0, 10**9
            if rng.random() < 0.25:
                turn_time = 3.0
                yaw_rate = rng.choice([-1.0, 1.0]) * (math.pi / 2) / turn_time
                t0 = int(rng.integers(0, n_frames))
                nt = int(round(turn_time / dt))
        elif kind < 0.75:  # parked car
            axis = "x" if rng.random() < 0.5 else "y"
            off = rng.choice([-9.0, 9.0])
            s = rng.uniform(-70, 70)
            x, y = (s, off) if axis == "x" else (off, s)
            heading = 0.0 if axis == "x" else math.pi / 2
            speed, label, yaw_rate, t0, nt = 0.0, 0, 0.0, 0, 10**9
        elif kind < 0.9:  # pedestrian on a sidewalk
            axis = "x" if rng.random() < 0.5 else "y"
            off = rng.choice([-12.0, 12.0])
            s = rng.uniform(-60, 60)
            x, y = (s, off) if axis == "x" else (off, s)
            heading = (0.0 if axis == "x" else math.pi / 2) + rng.choice([0.0, math.pi])
            speed, label, yaw_rate, t0, nt = rng.uniform(0.8, 1.6), 1, 0.0, 0, 10**9
        else:  # cyclist at the lane edge
            axis, off, heading = lanes[rng.integers(len(lanes))]
            off = off + math.copysign(2.5, off)
            s = rng.uniform(-60, 60)
            x, y = (s, off) if axis == "x" else (off, s)
            speed, label, yaw_rate, t0, nt = rng.uniform(3.0, 5.0), 2, 0.0, 0, 10**9
        if abs(x) < 9 and abs(y) < 9 and speed > 0 and label == 0:
            continue  # keep the junction clear at t=0
        gap = 9.0 if label == 0 else 3.0
        if not free(x, y, gap):
            continue
        placed.append((x, y))
        mean = CLASS_DIMS[label]
        dims = tuple(float(m * math.exp(rng.normal(0, DIM_SPREAD))) for m in mean)
        objs.append(ObjectSpec(x=float(x), y=float(y), heading=float(heading), speed=float(speed),
                               class_label=int(label), dims=dims, yaw_rate=float(yaw_rate),
                               turn_start=int(t0), turn_frames=int(nt)))
    return objs


def _roll_out(obj: ObjectSpec, n_frames: int, dt: float) -> np.ndarray:
    w, l, h = obj.dims if obj.dims is not None else CLASS_DIMS[obj.class_label]
    boxes = np.zeros((n_frames, BOX_DIM))
    x, y, th = obj.x, obj.y, obj.heading
    for t in range(n_frames):
        turning = obj.turn_start <= t < obj.turn_start + obj.turn_frames
        boxes[t] = [x, y, h / 2, w, l, h, normalize_angle(th),
                    obj.speed * math.cos(th), obj.speed * math.sin(th)]
        x += obj.speed * math.cos(th) * dt
        y += obj.speed * math.sin(th) * dt
        if turning:
            th += obj.yaw_rate * dt
    return boxes


def generate_scenario(spec: ScenarioSpec, seed: int) -> Scenario:
    """Deterministic scenario from (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng([seed, 7])
    dt = 1.0 / spec.rate_hz
    d = spec.feature_dim

    objects = spec.objects
    if objects is None:
        objects = _random_objects(rng, spec.n_objects, spec.n_frames, dt)
    tracks = [GroundTruthTrack(i, o.class_label, _roll_out(o, spec.n_frames, dt))
              for i, o in enumerate(objects)]

    ex, ey, eyaw = spec.ego_start
    ix, iy, iyaw = spec.infra_pose
    if spec.jitter:
        ex += rng.uniform(-10, 10)
        ix += rng.uniform(-5, 5)
        iy += rng.uniform(-3, 3)
        iyaw += rng.uniform(-0.15, 0.15)
    ego_speed = spec.ego_speed * (rng.uniform(0.7, 1.3) if spec.jitter else 1.0)

    vehicle = dataclasses.replace(spec.vehicle)
    infra = dataclasses.replace(spec.infra)
    vehicle.poses = [Pose.from_xy_yaw(ex + ego_speed * math.cos(eyaw) * t * dt,
                                      ey + ego_speed * math.sin(eyaw) * t * dt, eyaw)
                     for t in range(spec.n_frames)]
    infra.poses = [Pose.from_xy_yaw(ix, iy, iyaw)] * spec.n_frames
    for kind_id, agent in enumerate((vehicle, infra)):
        if agent.D is None:
            if agent.domain_gap:
                # a sensor's latent space is a property of the agent, shared by every scene
                agent.D, agent.e = sample_domain_operator(d, agent.domain_block,
                                                          np.random.default_rng([DOMAIN_SEED, kind_id]))
            else:
                agent.D, agent.e = np.eye(d), np.zeros(d)
    rel = [vehicle.poses[t].inverse().compose(infra.poses[t]) for t in range(spec.n_frames)]
    return Scenario(spec, seed, tracks, vehicle, infra, rel)


# --------------------------------------------------------------------------
# observation


def _in_range(agent: AgentConfig, boxes: np.ndarray) -> np.ndarray:
    x0, x1, y0, y1 = agent.horizontal_range
    z0, z1 = agent.height_range
    ok = (boxes[:, 0] >= x0) & (boxes[:, 0] <= x1) & (boxes[:, 1] >= y0) & (boxes[:, 1] <= y1)
    ok &= (boxes[:, 2] >= z0) & (boxes[:, 2] <= z1)
    if agent.fov < 2 * math.pi - 1e-9:
        bearing = np.arctan2(boxes[:, 1], boxes[:, 0])
        ok &= np.abs(bearing) <= agent.fov / 2
    return ok


def _occluded(boxes: np.ndarray, fraction: float) -> np.ndarray:
    """Angular-overlap occlusion test seen from the frame origin."""
    n = len(boxes)
    occ = np.zeros(n, dtype=bool)
    if n < 2:
        return occ
    centre = np.arctan2(boxes[:, 1], boxes[:, 0])
    dist = np.hypot(boxes[:, 0], boxes[:, 1])
    corners = corners_bev(boxes)
    rel = normalize_angle(np.arctan2(corners[..., 1], corners[..., 0]) - centre[:, None])
    lo = centre + rel.min(axis=1)
    hi = centre + rel.max(axis=1)
    order = np.argsort(dist)
    for rank, i in enumerate(order):
        width = hi[i] - lo[i]
        if width <= 0 or rank == 0:
            continue
        ivs = []
        for j in order[:rank]:
            shift = normalize_angle(centre[j] - centre[i])
            a = centre[i] + shift + (lo[j] - centre[j])
            b = centre[i] + shift + (hi[j] - centre[j])
            a, b = max(a, lo[i]), min(b, hi[i])
            if b > a:
                ivs.append((a, b))
        if not ivs:
            continue
        ivs.sort()
        covered, cur_a, cur_b = 0.0, ivs[0][0], ivs[0][1]
        for a, b in ivs[1:]:
            if a > cur_b:
                covered += cur_b - cur_a
                cur_a, cur_b = a, b
            else:
                cur_b = max(cur_b, b)
        covered += cur_b - cur_a
        occ[i] = covered / width >= fraction
    return occ


def gt_in_agent_frame(agent: AgentConfig, scenario: Scenario, t: int):
    """All GT boxes at frame t expressed in the agent frame."""
    boxes, labels, ids = scenario.world_boxes(t)
    return transform_boxes(boxes, agent.poses[t].inverse()), labels, ids


def visible_mask(agent: AgentConfig, scenario: Scenario, t: int) -> np.ndarray:
    """Which GT objects the agent could detect at frame t (range, FOV, occlusion)."""
    boxes, _, _ = gt_in_agent_frame(agent, scenario, t)
    ok = _in_range(agent, boxes) if len(boxes) else np.zeros(0, dtype=bool)
    if agent.occlusion and ok.sum() > 1:
        idx = np.flatnonzero(ok)
        occ = _occluded(boxes[idx], agent.occlusion_fraction)
        ok[idx[occ]] = False
    return ok


_EMBEDDERS: dict[int, ObjectEmbedder] = {}


def embedder(d: int) -> ObjectEmbedder:
    if d not in _EMBEDDERS:
        _EMBEDDERS[d] = ObjectEmbedder(d)
    return _EMBEDDERS[d]


def observe(agent: AgentConfig, scenario: Scenario, t: int, seed: int = 0) -> Detections:
    """Noisy detections of one agent at frame t, in the agent frame."""
    if not 0 <= t < scenario.n_frames:
        raise IndexError(f"frame {t} outside scenario")
    d = scenario.spec.feature_dim
    kind_id = 0 if agent.kind.startswith("veh") else 1
    rng = np.random.default_rng([scenario.seed, seed, t, kind_id, 11])
    boxes, labels, ids = gt_in_agent_frame(agent, scenario, t)
    vis = visible_mask(agent, scenario, t)
    keep = vis & (rng.random(len(boxes)) >= agent.miss_rate)
    boxes, labels, ids = boxes[keep], labels[keep], ids[keep]
    n = len(boxes)
    emb = embedder(d)
    lat = emb(labels, boxes[:, 3:6], boxes[:, THETA])
    noisy = boxes.copy()
    if n:
        noisy[:, 0:2] += rng.normal(0, agent.sigma_pos, size=(n, 2))
        noisy[:, 2] += rng.normal(0, agent.sigma_pos * 0.25, size=n)
        noisy[:, 3:6] *= np.exp(rng.normal(0, agent.sigma_dim, size=(n, 3)))
        noisy[:, THETA] = normalize_angle(noisy[:, THETA] + rng.normal(0, agent.sigma_yaw, size=n))
        noisy[:, VX:VY + 1] += rng.normal(0, agent.sigma_vel, size=(n, 2))
    mu, sd = agent.true_score
    scores = np.clip(rng.normal(mu, sd, size=n), 0.02, 0.99)

    n_clutter = int(rng.poisson(agent.clutter_rate))
    if n_clutter:
        x0, x1, y0, y1 = agent.horizontal_range
        cb = np.zeros((n_clutter, BOX_DIM))
        cl = rng.integers(0, len(CLASSES), size=n_clutter)
        for k in range(n_clutter):
            for _ in range(100):
                x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
                if abs(math.atan2(y, x)) <= agent.fov / 2:
                    break
            dims = np.array(CLASS_DIMS[int(cl[k])]) * np.exp(rng.normal(0, DIM_SPREAD, size=3))
            cb[k] = [x, y, dims[2] / 2, *dims, rng.uniform(-math.pi, math.pi), *rng.normal(0, 2.0, size=2)]
        clat = emb(cl, cb[:, 3:6], cb[:, THETA])
        mu, sd = agent.clutter_score
        noisy = np.concatenate([noisy, cb])
        labels = np.concatenate([labels, cl])
        ids = np.concatenate([ids, -np.ones(n_clutter, dtype=int)])
        lat = np.concatenate([lat, clat])
        scores = np.concatenate([scores, np.clip(rng.normal(mu, sd, size=n_clutter), 0.02, 0.99)])
    lat = lat @ agent.D.T + agent.e
    return Detections(noisy, labels.astype(int), scores, lat, ids.astype(int))


# --------------------------------------------------------------------------
# emulated transformer decoder


def bind_queries(det_xy: np.ndarray, track_xy: np.ndarray, fresh_xy: np.ndarray, gate: float):
    """Bind detections to query slots.

    Track slots take the detection nearest their reference point (one-to-one,
    minimum total distance, within ``gate``); leftover detections fill fresh
    slots by the same rule without a gate. Returns (track_det, fresh_det):
    detection index per slot or -1.
    """
    nt, nf, nd = len(track_xy), len(fresh_xy), len(det_xy)
    track_det = -np.ones(nt, dtype=int)
    fresh_det = -np.ones(nf, dtype=int)
    left = np.arange(nd)
    if nt and nd:
        dist = np.linalg.norm(track_xy[:, None, :2] - det_xy[None, :, :2], axis=-1)
        big = 1e6
        cost = np.where(dist <= gate, dist, big)
        for r, c in hungarian(cost).pairs:
            if dist[r, c] <= gate:
                track_det[r] = c
        left = np.setdiff1d(left, track_det[track_det >= 0])
    if nf and len(left):
        dist = np.linalg.norm(fresh_xy[:, None, :2] - det_xy[None, left, :2], axis=-1)
        for r, c in hungarian(dist).pairs:
            fresh_det[r] = left[c]
    return track_det, fresh_det


@dataclass
class DecoderOutput:
    """Instances emitted by the decoder stand-in (track slots + bound fresh slots)."""

    features: np.ndarray  # (N, d) updated query features
    refs: np.ndarray  # (N, 3)
    boxes: np.ndarray  # (N, 9) coarse boxes
    labels: np.ndarray
    scores: np.ndarray  # coarse detector score, 0 for placeholders
    is_track: np.ndarray  # bool
    track_ids: np.ndarray  # -1 for fresh
    det_index: np.ndarray  # -1 when unbound
    gt_ids: np.ndarray  # source GT id of the bound detection, -1 otherwise
    placeholders: np.ndarray  # (K, 9) low-score boxes of unbound fresh slots

    def __len__(self):
        return len(self.features)


class DecoderEmulator:
    """Binds detections to queries and mixes query and detection features."""

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator, gate: float = 4.0):
        self.d = d
        self.gate = gate
        self.mix = Linear(store, name + ".mix", 2 * d + 2, d, rng, init="xavier")
        W = store.params[self.mix.wn]
        W[:, :d] += 0.5 * np.eye(d)
        W[:, d:2 * d] += 0.5 * np.eye(d)

    def forward(self, dets: Detections, queries):
        d = self.d
        is_track = np.asarray(queries.is_track, dtype=bool)
        tr = np.flatnonzero(is_track)
        fr = np.flatnonzero(~is_track)
        track_det, fresh_det = bind_queries(dets.boxes[:, :3], queries.refs[tr], queries.refs[fr], self.gate)
        slot_det = -np.ones(len(queries.refs), dtype=int)
        slot_det[tr] = track_det
        slot_det[fr] = fresh_det
        keep = is_track | (slot_det >= 0)
        slots = np.flatnonzero(keep)
        det = slot_det[slots]
        bound = det >= 0
        n = len(slots)
        boxes = np.zeros((n, BOX_DIM))
        refs = queries.refs[slots].copy()
        labels = np.zeros(n, dtype=int)
        scores = np.zeros(n)
        latent = np.zeros((n, d))
        gt_ids = -np.ones(n, dtype=int)
        if n:
            prior = queries.boxes[slots]
            boxes[:] = prior
            boxes[:, :3] = refs
            labels[:] = queries.labels[slots]
            bi = det[bound]
            boxes[bound] = dets.boxes[bi]
            refs[bound] = dets.boxes[bi, :3]
            labels[bound] = dets.labels[bi]
            scores[bound] = dets.scores[bi]
            latent[bound] = dets.latents[bi]
            gt_ids[bound] = dets.gt_ids[bi]
        x = np.concatenate([queries.features[slots], latent, scores[:, None], bound[:, None].astype(float)], axis=1)
        feats, cache = self.mix.forward(x)
        unbound_fresh = (~is_track) & (slot_det < 0)
        ph = np.zeros((int(unbound_fresh.sum()), BOX_DIM))
        if len(ph):
            ph[:, :3] = queries.refs[unbound_fresh]
            ph[:, 3:6] = CLASS_DIMS[0]
        out = DecoderOutput(feats, refs, boxes, labels, scores, is_track[slots],
                            np.asarray(queries.track_ids)[slots], det, gt_ids, ph)
        return out, (cache, slots)

    def backward(self, cache, gfeat):
        """Returns the gradient w.r.t. the kept query features (rows of ``slots``)."""
        c, slots = cache
        gx = self.mix.backward(c, gfeat)
        return gx[:, :self.d], slots


# --------------------------------------------------------------------------
# serialization


def _box_record(box, label, score=None, gt_id=None):
    rec = {k: float(v) for k, v in zip(("x", "y", "z", "w", "l", "h", "theta", "vx", "vy"), box)}
    rec["class"] = int(label)
    if score is not None:
        rec["score"] = float(score)
    if gt_id is not None:
        rec["gt_id"] = int(gt_id)
    return rec


def scenario_records(scenario: Scenario, seed: int = 0):
    """Yield the header record then one record per (frame, agent)."""
    yield {"type": "header", "seed": scenario.seed, "observe_seed": seed, "spec": scenario.spec.to_dict()}
    for t in range(scenario.n_frames):
        for agent in (scenario.vehicle, scenario.infra):
            dets = observe(agent, scenario, t, seed)
            gt, labels, ids = gt_in_agent_frame(agent, scenario, t)
            vis = visible_mask(agent, scenario, t)
            pose = agent.poses[t]
            yield {
                "type": "frame", "frame": t, "agent": agent.kind,
                "pose": {"R": pose.R.tolist(), "t": pose.t.tolist()},
                "detections": [_box_record(b, l, s, g) for b, l, s, g in
                               zip(dets.boxes, dets.labels, dets.scores, dets.gt_ids)],
                "gt": [dict(_box_record(b, l, gt_id=i), visible=bool(v))
                       for b, l, i, v in zip(gt, labels, ids, vis)],
            }


def write_scenario(scenario: Scenario, path, seed: int = 0) -> str:
    """Write the line-delimited scenario file; returns its sha256."""
    h = hashlib.sha256()
    with open(path, "w") as fh:
        for rec in scenario_records(scenario, seed):
            line = json.dumps(rec, sort_keys=True) + "\n"
            h.update(line.encode())
            fh.write(line)
    return h.hexdigest()


def read_scenario_file(path):
    """Return (header, frame records) from a scenario file."""
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ValueError(f"{path}: missing header record")
    return lines[0], lines[1:]
