"""Per-frame tracking loop for one vehicle and one roadside unit.

Each agent runs its own extractor and decoding heads. In cooperative mode
the infrastructure's decoded instances are sent as a V2X message, aligned,
associated and aggregated with the vehicle instances, and the result is
decoded by the vehicle heads before track selection and propagation.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .fusion import (TAG_INFRA, TAG_VEHICLE, Aggregator, CrossAgentAlignment, GraphAssociation,
                     MatchSet, V2XMessage, box_message_bytes, decode_message, encode_message, match,
                     spatial_transform)
from .geometry import BOX_DIM, THETA, VX, VY, Pose, axis_angle_matrix, transform_boxes
from .mdfe import MDFE, HistoryBuffer, InstanceFeatures, QuerySet, history_update
from .numerics import MLP, ParamStore, hungarian, sigmoid
from .scene import CLASS_DIMS, Box3D, Detections

REG_DIM = 10  # dx, dy, dz, log w, log l, log h, sin, cos, vx, vy
FRESH_Z = 0.8
MAX_SPEED = 40.0  # m/s, decoded velocities are clipped to this


# --------------------------------------------------------------------------
# box parameterisation


def decode_boxes(raw, refs) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, REG_DIM)
    out = np.zeros((len(raw), BOX_DIM))
    out[:, :3] = np.asarray(refs).reshape(-1, 3) + raw[:, :3]
    out[:, 3:6] = np.exp(np.clip(raw[:, 3:6], -10, 10))
    out[:, THETA] = np.arctan2(raw[:, 6], raw[:, 7])
    out[:, VX:VY + 1] = np.clip(raw[:, 8:10], -MAX_SPEED, MAX_SPEED)
    return out


def encode_box_targets(boxes, refs) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    out = np.zeros((len(boxes), REG_DIM))
    out[:, :3] = boxes[:, :3] - np.asarray(refs).reshape(-1, 3)
    out[:, 3:6] = np.log(boxes[:, 3:6])
    out[:, 6] = np.sin(boxes[:, THETA])
    out[:, 7] = np.cos(boxes[:, THETA])
    out[:, 8:10] = boxes[:, VX:VY + 1]
    return out


def box_attributes(boxes) -> np.ndarray:
    """Wrap-free attribute vector used for L1 matching costs."""
    return encode_box_targets(boxes, np.zeros((len(np.asarray(boxes).reshape(-1, BOX_DIM)), 3)))


def fresh_grid(n: int, horizontal_range, seed: int) -> np.ndarray:
    """``n`` reference points on a jittered uniform grid over the range."""
    if n <= 0:
        return np.zeros((0, 3))
    x0, x1, y0, y1 = horizontal_range
    nx = max(1, int(math.ceil(math.sqrt(n * (x1 - x0) / (y1 - y0)))))
    ny = int(math.ceil(n / nx))
    cx, cy = (x1 - x0) / nx, (y1 - y0) / ny
    gx, gy = np.meshgrid(x0 + cx * (np.arange(nx) + 0.5), y0 + cy * (np.arange(ny) + 0.5), indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]
    rng = np.random.default_rng([seed, 3])
    pts = pts + rng.uniform(-0.25, 0.25, size=pts.shape) * [cx, cy]
    return np.concatenate([pts, np.full((n, 1), FRESH_Z)], axis=1)


# --------------------------------------------------------------------------
# tracks


@dataclass
class Track:
    track_id: int
    feature: np.ndarray
    ref: np.ndarray
    score: float
    age: int = 1
    misses: int = 0
    class_label: int = 0
    box: np.ndarray = None
    gt_id: int = -1


@dataclass
class TrackSet:
    tracks: list = field(default_factory=list)
    next_id: int = 0

    def __len__(self):
        return len(self.tracks)

    def ids(self) -> list:
        return [t.track_id for t in self.tracks]

    def get(self, track_id: int) -> Track:
        for t in self.tracks:
            if t.track_id == track_id:
                return t
        raise KeyError(track_id)

    def new_id(self) -> int:
        self.next_id += 1
        return self.next_id - 1


def init_queries(tracks: TrackSet, n_fresh: int, seed: int, fresh_feature=None,
                 horizontal_range=(-51.2, 51.2, -51.2, 51.2), d: int = None) -> QuerySet:
    """Track slots first (inherited feature and point), then ``n_fresh`` fresh slots."""
    if n_fresh < 0:
        raise ValueError("n_fresh must be >= 0")
    if fresh_feature is None:
        fresh_feature = np.zeros(d if d is not None else len(tracks.tracks[0].feature))
    d = len(fresh_feature)
    nt = len(tracks)
    feats = np.zeros((nt + n_fresh, d))
    refs = np.zeros((nt + n_fresh, 3))
    boxes = np.zeros((nt + n_fresh, BOX_DIM))
    labels = np.zeros(nt + n_fresh, dtype=int)
    ids = -np.ones(nt + n_fresh, dtype=int)
    for i, t in enumerate(tracks.tracks):
        feats[i], refs[i], boxes[i], labels[i], ids[i] = t.feature, t.ref, t.box, t.class_label, t.track_id
    feats[nt:] = fresh_feature
    refs[nt:] = fresh_grid(n_fresh, horizontal_range, seed)
    boxes[nt:, :3] = refs[nt:]
    boxes[nt:, 3:6] = CLASS_DIMS[0]
    is_track = np.zeros(nt + n_fresh, dtype=bool)
    is_track[:nt] = True
    return QuerySet(feats, refs, is_track, ids, boxes, labels)


@dataclass
class Instances:
    """Decoded rows handed to selection."""

    track_ids: np.ndarray  # -1 for rows without a track yet
    features: np.ndarray  # semantic features, become the next query features
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    gt_ids: np.ndarray = None

    def __len__(self):
        return len(self.track_ids)


def propagate_boxes(boxes, dt: float, ego_motion: Pose = None) -> np.ndarray:
    """Constant-velocity step, then into the next ego frame if the agent moves."""
    out = np.array(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    out[:, :2] += out[:, VX:VY + 1] * dt
    if ego_motion is not None and len(out):
        out = transform_boxes(out, ego_motion)
    return out


def select_and_propagate(inst: Instances, tracks: TrackSet, dt: float, sigma_keep: float = 0.4,
                         patience: int = 5, ego_motion: Pose = None, keep=None):
    """Returns (next TrackSet, id per row or -1 when the row has no live track)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = len(inst)
    keep = inst.scores >= sigma_keep if keep is None else np.asarray(keep, dtype=bool)
    out = TrackSet(next_id=tracks.next_id)
    row_ids = -np.ones(n, dtype=int)
    boxes = propagate_boxes(inst.boxes, dt, ego_motion)
    gt = inst.gt_ids if inst.gt_ids is not None else -np.ones(n, dtype=int)
    for r in range(n):
        tid = int(inst.track_ids[r])
        if tid >= 0:
            old = tracks.get(tid)
            misses = 0 if keep[r] else old.misses + 1
            if misses > patience:
                continue
            age = old.age + 1
        else:
            if not keep[r]:
                continue
            tid, misses, age = out.new_id(), 0, 1
        out.tracks.append(Track(tid, np.array(inst.features[r]), boxes[r, :3].copy(), float(inst.scores[r]),
                                age, misses, int(inst.labels[r]), boxes[r].copy(), int(gt[r])))
        row_ids[r] = tid
    return out, row_ids


def compensate_latency(message: V2XMessage, delay: float, velocities) -> V2XMessage:
    """Advance reference points by velocity x delay; features untouched."""
    if delay < 0:
        raise ValueError("delay must be >= 0")
    if delay == 0 or len(message) == 0:
        return message
    refs = message.refs.copy()
    refs[:, :2] += np.asarray(velocities).reshape(-1, 2) * delay
    return V2XMessage(message.M, message.S, refs, message.scores, message.labels, message.frame)


def late_fuse_boxes(vboxes, vscores, iboxes, iscores, pose: Pose, gate: float = 2.0):
    """Union of both box sets in the vehicle frame with duplicates merged.

    Returns (boxes, scores, vehicle index, infra index); index -1 marks a
    box that did not come from that agent.
    """
    vboxes = np.asarray(vboxes, dtype=np.float64).reshape(-1, BOX_DIM)
    ib = transform_boxes(np.asarray(iboxes, dtype=np.float64).reshape(-1, BOX_DIM), pose)
    vscores, iscores = np.asarray(vscores, dtype=np.float64), np.asarray(iscores, dtype=np.float64)
    pairs = []
    if len(vboxes) and len(ib):
        dist = np.linalg.norm(vboxes[:, None, :2] - ib[None, :, :2], axis=-1)
        cost = np.where(dist <= gate, dist, 1e6)
        pairs = [(r, c) for r, c in hungarian(cost).pairs if dist[r, c] <= gate]
    mi = {c: r for r, c in pairs}
    boxes = vboxes.copy()
    scores = vscores.copy()
    for r, c in pairs:
        if iscores[c] > vscores[r]:
            boxes[r], scores[r] = ib[c], iscores[c]
    extra = [c for c in range(len(ib)) if c not in mi]
    vi = np.concatenate([np.arange(len(vboxes)), -np.ones(len(extra), dtype=int)])
    ii = -np.ones(len(vboxes) + len(extra), dtype=int)
    for r, c in pairs:
        ii[r] = c
    ii[len(vboxes):] = extra
    return (np.concatenate([boxes, ib[extra]]), np.concatenate([scores, iscores[extra]]), vi, ii)


# --------------------------------------------------------------------------
# models


class AgentModel:
    """Extractor plus regression and classification heads of one agent."""

    def __init__(self, store: ParamStore, prefix: str, cfg: Config, rng, horizontal_range):
        d = cfg.d
        self.cfg, self.store, self.prefix = cfg, store, prefix
        self.horizontal_range = tuple(horizontal_range)
        self.mdfe = MDFE(store, prefix + ".mdfe", d, cfg.tau, rng, cfg.n_heads, cfg.ff_mult, cfg.bind_gate)
        self.reg = MLP(store, prefix + ".reg", [d, d, REG_DIM], rng, last_gain=0.1)
        self.cls = MLP(store, prefix + ".cls", [d, d, cfg.n_classes], rng, last_gain=0.1)
        bias = store.params[self.reg.layers[-1].bn]
        w, l, h = CLASS_DIMS[0]
        bias[3:6] = np.log([w, l, h])
        bias[7] = 1.0
        store.params[self.cls.layers[-1].bn][:] = -2.0

    def queries(self, tracks: TrackSet) -> QuerySet:
        return init_queries(tracks, self.cfg.n_fresh, self.cfg.seed, self.mdfe.fresh_query,
                            self.horizontal_range)

    def decode_forward(self, M, S, refs):
        raw, cr = self.reg.forward(M)
        logits, cc = self.cls.forward(S)
        return raw, logits, (cr, cc)

    def decode_backward(self, cache, graw, glogits):
        cr, cc = cache
        return self.reg.backward(cr, graw), self.cls.backward(cc, glogits)

    def decode(self, M, S, refs):
        """(boxes (N, 9), class probabilities (N, C))."""
        raw, logits, _ = self.decode_forward(M, S, refs)
        return decode_boxes(raw, refs), sigmoid(logits)


def decode(agent: AgentModel, feats: InstanceFeatures, refs):
    """Box3D list plus class probabilities; score is the max probability."""
    boxes, probs = agent.decode(feats.M, feats.S, refs)
    out = []
    for b, p in zip(boxes, probs):
        out.append(Box3D(*b[:9], class_label=int(np.argmax(p)), score=float(np.max(p))))
    return out, probs


class CoopTrackModel:
    """All parameters live in one store under the prefixes veh., inf. and coop."""

    def __init__(self, cfg: Config = None, seed: int = None):
        self.cfg = (cfg or Config()).validate()
        seed = self.cfg.seed if seed is None else seed
        rng = np.random.default_rng([seed, 1])
        self.store = ParamStore()
        d = self.cfg.d
        self.vehicle = AgentModel(self.store, "veh", self.cfg, rng, self.cfg.vehicle_range)
        self.infra = AgentModel(self.store, "inf", self.cfg, rng, self.cfg.infra_range)
        self.caa = CrossAgentAlignment(self.store, "coop.caa", d, self.cfg.block, rng)
        self.gba = GraphAssociation(self.store, "coop.gba", d, rng)
        self.agg = Aggregator(self.store, "coop.agg", d, rng)

    def agent(self, kind: str) -> AgentModel:
        return self.vehicle if kind.startswith("veh") else self.infra

    def save(self, path):
        self.store.save(path)

    def load(self, path, strict: bool = True):
        self.store.load(path, strict=strict)
        return self


# --------------------------------------------------------------------------
# per-frame pieces shared with training


@dataclass
class AgentState:
    tracks: TrackSet
    history: HistoryBuffer


def new_agent_state(agent: AgentModel) -> AgentState:
    return AgentState(TrackSet(), agent.mdfe.new_history())


@dataclass
class AgentFrame:
    out: object  # MDFEOutput
    cache: tuple
    raw: np.ndarray
    logits: np.ndarray
    dcache: tuple

    @property
    def features(self) -> InstanceFeatures:
        return self.out.features

    @property
    def refs(self) -> np.ndarray:
        return self.out.decoder.refs

    @property
    def boxes(self) -> np.ndarray:
        return decode_boxes(self.raw, self.refs)

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)


def agent_forward(agent: AgentModel, dets: Detections, state: AgentState) -> AgentFrame:
    out, cache = agent.mdfe.forward(dets, agent.queries(state.tracks), state.history)
    raw, logits, dcache = agent.decode_forward(out.features.M, out.features.S, out.decoder.refs)
    return AgentFrame(out, cache, raw, logits, dcache)


def instances_from(track_ids, feats: InstanceFeatures, boxes, probs, gt_ids=None) -> Instances:
    probs = np.asarray(probs)
    scores = probs.max(axis=1) if len(probs) else np.zeros(0)
    labels = probs.argmax(axis=1) if len(probs) else np.zeros(0, int)
    return Instances(np.asarray(track_ids, dtype=int), feats.S, boxes, scores, labels, gt_ids)


def advance_agent(state: AgentState, inst: Instances, feats: InstanceFeatures, dt, cfg: Config,
                  ego_motion: Pose = None, keep=None):
    """Selection, propagation and history push. Returns (next state, row ids)."""
    tracks, row_ids = select_and_propagate(inst, state.tracks, dt, cfg.sigma_keep, cfg.patience,
                                           ego_motion, keep)
    alive = row_ids >= 0
    hist = history_update(state.history, feats.M[alive], feats.S[alive], row_ids[alive])
    return AgentState(tracks, hist), row_ids


def build_message(frame: AgentFrame, sigma_keep: float, t: int = 0) -> V2XMessage:
    probs = frame.probs
    scores = probs.max(axis=1) if len(probs) else np.zeros(0)
    rows = np.flatnonzero(scores >= sigma_keep)
    boxes = frame.boxes
    return V2XMessage(frame.features.M[rows], frame.features.S[rows], boxes[rows, :3], scores[rows],
                      probs[rows].argmax(axis=1) if len(rows) else np.zeros(0, int), t), rows


def rotation_noise(sigma: float, rng) -> np.ndarray:
    """Rotation about a random axis by an angle ~ N(0, sigma)."""
    axis = rng.normal(size=3)
    return axis_angle_matrix(axis, rng.normal(0.0, sigma))


@dataclass
class FusionResult:
    feats: InstanceFeatures
    refs: np.ndarray
    tags: list
    vehicle_index: np.ndarray
    infra_index: np.ndarray
    matches: MatchSet
    A: np.ndarray
    aligned: InstanceFeatures
    aligned_refs: np.ndarray
    caches: tuple


def fuse(model: CoopTrackModel, vframe: AgentFrame, msg: V2XMessage, pose: Pose, caa_pose: Pose = None,
         threshold: float = None, matches: MatchSet = None) -> FusionResult:
    """Align, associate and aggregate one message into the vehicle instances."""
    threshold = model.cfg.match_threshold if threshold is None else threshold
    caa_pose = pose if caa_pose is None else caa_pose
    fI = InstanceFeatures(msg.M, msg.S)
    aligned, ccaa = model.caa.forward(fI, caa_pose)
    pI = spatial_transform(msg.refs, pose)
    pV = vframe.refs
    aff, cgba = model.gba.forward(vframe.features, aligned, pV, pI)
    if matches is None:
        matches = match(aff.A, threshold)
    agg, cagg = model.agg.forward(matches, vframe.features, aligned, pV, pI)
    return FusionResult(agg.features, agg.refs, agg.tags, agg.vehicle_index, agg.infra_index, matches,
                        aff.A, aligned, pI, (ccaa, cgba, cagg, aff.logits))


# --------------------------------------------------------------------------
# the streaming step


@dataclass
class FrameInputs:
    frame: int
    vehicle: Detections
    infra: Detections | None
    vehicle_pose: Pose  # world <- vehicle
    infra_pose: Pose  # world <- infrastructure
    ego_motion: Pose = None  # vehicle(t) -> vehicle(t + 1)
    dt: float = 0.1


@dataclass
class StepOptions:
    mode: str = "coop"  # coop | no_fusion | late_fusion
    delay: float = 0.0  # seconds
    compensate: bool = False
    rot_sigma: float = 0.0
    rot_scope: str = "caa"  # caa | global
    zero_infra: bool = False
    wire: bool = True
    noise_seed: int = 0
    record: bool = False  # keep fusion internals in the diagnostics

    def validate(self):
        if self.mode not in ("coop", "no_fusion", "late_fusion"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if self.rot_scope not in ("caa", "global"):
            raise ValueError(f"unknown rotation-noise scope {self.rot_scope!r}")
        return self


@dataclass
class TrackerState:
    vehicle: AgentState
    infra: AgentState
    outbox: deque = field(default_factory=lambda: deque(maxlen=64))
    frame: int = 0


def new_state(model: CoopTrackModel) -> TrackerState:
    return TrackerState(new_agent_state(model.vehicle), new_agent_state(model.infra))


@dataclass
class FrameOutput:
    frame: int
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    probs: np.ndarray
    ids: np.ndarray
    tags: list
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def box_list(self) -> list:
        return [Box3D(*b[:9], class_label=int(c), score=float(s)) for b, c, s in zip(self.boxes, self.labels, self.scores)]

    def records(self) -> list:
        return [{"frame": self.frame, "id": int(i), "class": int(c), "box": [float(v) for v in b],
                 "score": float(s), "tag": tag}
                for i, c, b, s, tag in zip(self.ids, self.labels, self.boxes, self.scores, self.tags)]


def _emit(t, boxes, probs, row_ids, tags, diag) -> FrameOutput:
    alive = np.flatnonzero(row_ids >= 0)
    p = probs[alive]
    return FrameOutput(t, boxes[alive], p.max(axis=1) if len(alive) else np.zeros(0),
                       p.argmax(axis=1) if len(alive) else np.zeros(0, int), p,
                       row_ids[alive], [tags[i] for i in alive], diag)


def step(model: CoopTrackModel, inputs: FrameInputs, state: TrackerState, opts: StepOptions = None):
    """One frame of the pipeline. Returns (FrameOutput, next state)."""
    opts = (opts or StepOptions()).validate()
    cfg = model.cfg
    t, dt = inputs.frame, inputs.dt
    diag = {"message_bytes": 0, "n_infra": 0, "n_matched": 0}

    vframe = agent_forward(model.vehicle, inputs.vehicle, state.vehicle)
    vids = vframe.out.decoder.track_ids
    infra_state, outbox = state.infra, state.outbox
    infra_out = None
    if opts.mode != "no_fusion" and inputs.infra is not None:
        iframe = agent_forward(model.infra, inputs.infra, state.infra)
        iboxes = iframe.boxes
        iinst = instances_from(iframe.out.decoder.track_ids, iframe.features, iboxes, iframe.probs)
        infra_state, irow = advance_agent(state.infra, iinst, iframe.features, dt, cfg)
        msg, rows = build_message(iframe, cfg.sigma_keep, t)
        outbox = deque(state.outbox, maxlen=state.outbox.maxlen)
        outbox.append((t, msg, inputs.infra_pose, iboxes[rows]))
        infra_out = _emit(t, iboxes, iframe.probs, irow, [TAG_INFRA] * len(irow), {})

    if opts.mode == "no_fusion":
        feats, refs, tags = vframe.features, vframe.refs, [TAG_VEHICLE] * len(vids)
        boxes, probs = decode_boxes(vframe.raw, refs), sigmoid(vframe.logits)
        row_track = vids
    elif opts.mode == "late_fusion":
        feats, refs = vframe.features, vframe.refs
        boxes, probs = decode_boxes(vframe.raw, refs), sigmoid(vframe.logits)
        row_track = vids
        tags = [TAG_VEHICLE] * len(vids)
    else:
        msg, msg_pose, age, msg_boxes = _pick_message(outbox, t, opts.delay, dt, cfg.d)
        if opts.zero_infra:
            msg = V2XMessage.empty(cfg.d, t)
        if opts.wire:
            buf = encode_message(msg)
            diag["message_bytes"] = len(buf)
            msg = decode_message(buf, cfg.d)
        if opts.compensate and age > 0 and len(msg):
            vel = decode_boxes(model.infra.reg.forward(msg.M)[0], msg.refs)[:, VX:VY + 1]
            msg = compensate_latency(msg, age, vel)
        pose = inputs.vehicle_pose.inverse().compose(msg_pose if msg_pose is not None else inputs.infra_pose)
        caa_pose = pose
        if opts.rot_sigma > 0:
            Rn = rotation_noise(opts.rot_sigma, np.random.default_rng([opts.noise_seed, t, 5]))
            caa_pose = Pose(Rn @ pose.R, pose.t)
            if opts.rot_scope == "global":
                pose = caa_pose
        fr = fuse(model, vframe, msg, pose, caa_pose)
        feats, refs, tags = fr.feats, fr.refs, fr.tags
        raw, logits, _ = model.vehicle.decode_forward(feats.M, feats.S, refs)
        boxes, probs = decode_boxes(raw, refs), sigmoid(logits)
        row_track = np.concatenate([vids, -np.ones(len(tags) - len(vids), dtype=int)])
        diag["n_infra"] = len(msg)
        diag["n_matched"] = len(fr.matches.pairs)
        if fr.A.size:
            diag["affinity_mean"] = float(fr.A.mean())
            diag["affinity_max"] = float(fr.A.max())
        if opts.record:
            diag["record"] = {"fusion": fr, "vehicle_boxes": vframe.out.decoder.boxes, "vehicle_refs": vframe.refs,
                              "infra_boxes": transform_boxes(msg_boxes, pose) if len(msg) else np.zeros((0, BOX_DIM)),
                              "pose": pose}

    inst = instances_from(row_track, feats, boxes, probs)
    vstate, row_ids = advance_agent(state.vehicle, inst, feats, dt, cfg, inputs.ego_motion)
    out = _emit(t, boxes, probs, row_ids, tags, diag)

    if opts.mode == "late_fusion" and infra_out is not None:
        out = _late_merge(out, infra_out, inputs.vehicle_pose.inverse().compose(inputs.infra_pose), cfg)

    return out, TrackerState(vstate, infra_state, outbox, t + 1)


LATE_ID_OFFSET = 1_000_000


def _late_merge(vout: FrameOutput, iout: FrameOutput, pose: Pose, cfg: Config) -> FrameOutput:
    sent = iout.scores >= cfg.sigma_keep
    ib, isc = iout.boxes[sent], iout.scores[sent]
    boxes, scores, vi, ii = late_fuse_boxes(vout.boxes, vout.scores, ib, isc, pose, cfg.late_gate)
    ids = np.where(vi >= 0, vout.ids[np.maximum(vi, 0)] if len(vout) else -1,
                   LATE_ID_OFFSET + (iout.ids[sent][np.maximum(ii, 0)] if len(ib) else 0))
    labels = np.where(vi >= 0, vout.labels[np.maximum(vi, 0)] if len(vout) else 0,
                      iout.labels[sent][np.maximum(ii, 0)] if len(ib) else 0)
    tags = ["fused" if (a >= 0 and b >= 0) else (TAG_VEHICLE if a >= 0 else TAG_INFRA) for a, b in zip(vi, ii)]
    probs = np.zeros((len(boxes), cfg.n_classes))
    probs[np.arange(len(boxes)), labels.astype(int)] = scores
    diag = dict(vout.diagnostics)
    diag["message_bytes"] = box_message_bytes(len(ib))
    diag["n_infra"] = len(ib)
    return FrameOutput(vout.frame, boxes, scores, labels.astype(int), probs, ids.astype(int), tags, diag)


def _pick_message(outbox, t: int, delay: float, dt: float, d: int):
    """Newest message at least ``delay`` old: (message, infra pose, age in seconds, sender-side boxes)."""
    lag = int(round(delay / dt))
    for tm, msg, pose, boxes in reversed(outbox):
        if tm <= t - lag:
            return msg, pose, (t - tm) * dt, boxes
    return V2XMessage.empty(d, t), None, 0.0, np.zeros((0, BOX_DIM))


# --------------------------------------------------------------------------
# running a scenario


def scenario_inputs(scenario, t: int, det_seed: int = 0, with_infra: bool = True) -> FrameInputs:
    from .scene import observe
    veh, inf = scenario.vehicle, scenario.infra
    return FrameInputs(t, observe(veh, scenario, t, det_seed),
                       observe(inf, scenario, t, det_seed) if with_infra else None,
                       veh.poses[t], inf.poses[t],
                       scenario.ego_motion(t) if t + 1 < scenario.n_frames else None, scenario.dt)


def run_scenario(model: CoopTrackModel, scenario, opts: StepOptions = None, det_seed: int = 0) -> list:
    opts = (opts or StepOptions()).validate()
    state = new_state(model)
    outs = []
    for t in range(scenario.n_frames):
        inp = scenario_inputs(scenario, t, det_seed, with_infra=opts.mode != "no_fusion")
        out, state = step(model, inp, state, opts)
        outs.append(out)
    return outs


def write_outputs(outputs, path):
    with open(path, "w") as fh:
        for out in outputs:
            for rec in out.records():
                fh.write(json.dumps(rec) + "\n")


def read_outputs(path) -> dict:
    """frame -> list of records."""
    frames: dict[int, list] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                frames.setdefault(rec["frame"], []).append(rec)
    return frames

