"""Two-stage streaming training.

Stage 1 trains each agent's tracker on its own detections. Stage 2 runs
the cooperative pipeline and adds the association loss on labels generated
by matching both agents' instances to ground truth. Gradients stay within
a frame; track queries and history are carried across frames detached.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .benchmark import agent_gt, coop_gt
from .config import Config
from .fusion import CrossAgentAlignment
from .geometry import transform_boxes
from .mdfe import InstanceFeatures
from .numerics import ConfigurationError, adamw_step, cosine_lr, hungarian, sigmoid, sigmoid_focal_loss
from .scene import embedder, observe, visible_mask
from .tracker import (AgentFrame, AgentModel, CoopTrackModel, advance_agent, agent_forward, box_attributes,
                      build_message, decode_boxes, encode_box_targets, fuse, instances_from, new_agent_state)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
BIG = 1e6


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class LossReport:
    l_bbx: float = 0.0
    l_cls: float = 0.0
    l_asso: float = 0.0
    weights: tuple = (0.25, 2.0, 10.0)
    n_matched: int = 0
    n_positive: int = 0

    @property
    def total(self) -> float:
        wb, wc, wa = self.weights
        return wb * self.l_bbx + wc * self.l_cls + wa * self.l_asso


@dataclass
class AssociationLabels:
    labels: np.ndarray  # (N_V, N_I) of POSITIVE / NEGATIVE / IGNORE
    vehicle_gt: np.ndarray  # matched GT id per vehicle instance, -1 if none
    infra_gt: np.ndarray


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    steps: int = 0
    log: list = field(default_factory=list)


# --------------------------------------------------------------------------
# matching to ground truth


def l1_cost(pred_boxes, gt_boxes, gate: float = None):
    """(L1 attribute cost, centre distance) between every prediction and GT."""
    pa, ga = box_attributes(pred_boxes), box_attributes(gt_boxes)
    cost = np.abs(pa[:, None, :] - ga[None, :, :]).sum(axis=-1)
    dist = np.linalg.norm(np.asarray(pred_boxes)[:, None, :2] - np.asarray(gt_boxes)[None, :, :2], axis=-1)
    if gate is not None:
        cost = np.where(dist <= gate, cost, BIG)
    return cost, dist


def match_to_gt(pred_boxes, gt_boxes, gt_ids, gate: float = None) -> np.ndarray:
    """GT id per prediction from a min-L1 one-to-one assignment (-1 when unmatched or gated out)."""
    n = len(pred_boxes)
    out = -np.ones(n, dtype=int)
    if n == 0 or len(gt_boxes) == 0:
        return out
    cost, dist = l1_cost(pred_boxes, gt_boxes, gate)
    for r, c in hungarian(cost).pairs:
        if cost[r, c] < BIG:
            out[r] = gt_ids[c]
    return out


def gt_match(is_track, bound_gt, pred_boxes, gt_boxes, gt_ids, gate: float = None, refs=None,
             keep_radius: float = None) -> np.ndarray:
    """GT row index per slot, -1 for background.

    Track slots keep their bound GT while it exists (and, when ``refs`` and
    ``keep_radius`` are given, while the slot's reference point stays within
    that radius of it); other slots are assigned to the still-unbound GTs by
    minimum L1 box cost.
    """
    n = len(pred_boxes)
    gt_ids = np.asarray(gt_ids, dtype=int)
    row_of = {int(g): i for i, g in enumerate(gt_ids)}
    out = -np.ones(n, dtype=int)
    is_track = np.asarray(is_track, dtype=bool)
    bound_gt = np.asarray(bound_gt, dtype=int)
    taken = set()
    for r in np.flatnonzero(is_track):
        g = int(bound_gt[r])
        if g >= 0 and g in row_of and row_of[g] not in taken:
            if keep_radius is not None and refs is not None and \
                    np.linalg.norm(np.asarray(refs)[r, :2] - np.asarray(gt_boxes)[row_of[g], :2]) > keep_radius:
                continue
            out[r] = row_of[g]
            taken.add(row_of[g])
    free_rows = np.flatnonzero(~is_track)
    free_gt = np.array([i for i in range(len(gt_ids)) if i not in taken], dtype=int)
    if len(free_rows) and len(free_gt):
        cost, _ = l1_cost(np.asarray(pred_boxes)[free_rows], np.asarray(gt_boxes)[free_gt], gate)
        for r, c in hungarian(cost).pairs:
            if cost[r, c] < BIG:
                out[free_rows[r]] = free_gt[c]
    return out


def gen_assoc_labels(vehicle_boxes, infra_boxes, gt_boxes, gt_ids, gate: float = 2.0) -> AssociationLabels:
    """Positive where both agents' instances matched the same GT id, negative elsewhere.

    ``infra_boxes`` must already be in the vehicle frame.
    """
    vg = match_to_gt(np.asarray(vehicle_boxes).reshape(-1, 9), gt_boxes, gt_ids, gate)
    ig = match_to_gt(np.asarray(infra_boxes).reshape(-1, 9), gt_boxes, gt_ids, gate)
    labels = np.full((len(vg), len(ig)), NEGATIVE, dtype=np.int8)
    labels[(vg[:, None] == ig[None, :]) & (vg[:, None] >= 0)] = POSITIVE
    return AssociationLabels(labels, vg, ig)


# --------------------------------------------------------------------------
# loss terms


def detection_loss(raw, logits, refs, assign, gt_boxes, gt_labels, cfg: Config):
    """Returns (L_bbx, L_cls, d(weighted)/d raw, d(weighted)/d logits, n matched)."""
    m = np.flatnonzero(assign >= 0)
    nm = max(len(m), 1)
    graw = np.zeros_like(raw)
    l_bbx = 0.0
    if len(m):
        tgt = encode_box_targets(np.asarray(gt_boxes)[assign[m]], np.asarray(refs)[m])
        diff = raw[m] - tgt
        l_bbx = float(np.abs(diff).sum() / nm)
        graw[m] = cfg.lambda_bbx * np.sign(diff) / nm
    target = np.zeros_like(logits)
    if len(m):
        target[m, np.asarray(gt_labels)[assign[m]]] = 1.0
    fl, gl = sigmoid_focal_loss(logits, target, cfg.cls_alpha, cfg.cls_gamma)
    l_cls = float(fl.sum() / nm)
    return l_bbx, l_cls, graw, cfg.lambda_cls * gl / nm, len(m)


def association_loss(logits, labels: AssociationLabels, cfg: Config):
    """Mean focal loss over labelled cells; returns (loss, d loss / d logits)."""
    lab = labels.labels
    valid = lab != IGNORE
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits)
    fl, g = sigmoid_focal_loss(logits, (lab == POSITIVE).astype(float), cfg.asso_alpha, cfg.asso_gamma)
    return float(fl[valid].sum() / n), np.where(valid, g, 0.0) / n


def _check_finite(rep: LossReport, step: int):
    if not all(math.isfinite(v) for v in (rep.l_bbx, rep.l_cls, rep.l_asso)):
        raise TrainingDivergence(f"non-finite loss at step {step}: {rep}")


def _bindings(state, track_ids) -> np.ndarray:
    out = -np.ones(len(track_ids), dtype=int)
    gt = {t.track_id: t.gt_id for t in state.tracks.tracks}
    for r, tid in enumerate(track_ids):
        if tid >= 0:
            out[r] = gt.get(int(tid), -1)
    return out


# --------------------------------------------------------------------------
# per-frame training steps


def _agent_supervision(agent: AgentModel, frame: AgentFrame, state, gt, cfg: Config):
    gt_boxes, gt_labels, gt_ids = gt
    ids = frame.out.decoder.track_ids
    assign = gt_match(ids >= 0, _bindings(state, ids), frame.boxes, gt_boxes, gt_ids, cfg.label_gate,
                      frame.refs, cfg.bind_gate)
    terms = detection_loss(frame.raw, frame.logits, frame.refs, assign, gt_boxes, gt_labels, cfg)
    return assign, terms


def _advance_training(state, frame_ids, feats, boxes, probs, assign, gt_ids, cfg, dt, ego_motion):
    gtid = np.where(assign >= 0, np.asarray(gt_ids)[np.maximum(assign, 0)] if len(gt_ids) else -1, -1)
    inst = instances_from(frame_ids, feats, boxes, probs, gtid)
    keep = (assign >= 0) | (inst.scores >= cfg.sigma_keep)
    state, _ = advance_agent(state, inst, feats, dt, cfg, ego_motion, keep)
    return state


def stage1_frame(model: CoopTrackModel, kind: str, scenario, t: int, state, det_seed: int, cfg: Config):
    """Forward, loss and backward for one agent at one frame. Returns (LossReport, next state)."""
    agent = model.agent(kind)
    dets = observe(scenario.agent(kind), scenario, t, det_seed)
    frame = agent_forward(agent, dets, state)
    gt = agent_gt(scenario, kind, t)
    assign, (l_bbx, l_cls, graw, glog, nm) = _agent_supervision(agent, frame, state, gt, cfg)
    gM, gS = agent.decode_backward(frame.dcache, graw, glog)
    agent.mdfe.backward(frame.cache, gM, gS)
    ego = scenario.ego_motion(t) if kind.startswith("veh") and t + 1 < scenario.n_frames else None
    nxt = _advance_training(state, frame.out.decoder.track_ids, frame.features, frame.boxes, frame.probs,
                            assign, gt[2], cfg, scenario.dt, ego)
    rep = LossReport(l_bbx, l_cls, 0.0, (cfg.lambda_bbx, cfg.lambda_cls, cfg.lambda_asso), nm)
    return rep, nxt


def stage2_frame(model: CoopTrackModel, scenario, t: int, vstate, istate, det_seed: int, cfg: Config):
    """Cooperative forward/backward. Returns (LossReport, next vehicle state, next infra state)."""
    veh, inf = scenario.vehicle, scenario.infra
    idets = observe(inf, scenario, t, det_seed)
    vdets = observe(veh, scenario, t, det_seed)
    iframe = agent_forward(model.infra, idets, istate)
    igt = agent_gt(scenario, "infra", t)
    iassign, (ib, ic, igraw, iglog, inm) = _agent_supervision(model.infra, iframe, istate, igt, cfg)
    msg, rows = build_message(iframe, cfg.sigma_keep, t)

    vframe = agent_forward(model.vehicle, vdets, vstate)
    pose = veh.poses[t].inverse().compose(inf.poses[t])
    fr = fuse(model, vframe, msg, pose)
    cgt_boxes, cgt_labels, cgt_ids = coop_gt(scenario, t)
    labels = gen_assoc_labels(vframe.out.decoder.boxes, transform_boxes(iframe.boxes[rows], pose),
                              cgt_boxes, cgt_ids, cfg.label_gate)
    ccaa, cgba, cagg, alogits = fr.caches
    l_asso, galogit = association_loss(alogits, labels, cfg)

    raw, logits, dcache = model.vehicle.decode_forward(fr.feats.M, fr.feats.S, fr.refs)
    vids = vframe.out.decoder.track_ids
    row_track = np.concatenate([vids, -np.ones(len(fr.tags) - len(vids), dtype=int)])
    boxes = decode_boxes(raw, fr.refs)
    assign = gt_match(row_track >= 0, _bindings(vstate, row_track), boxes, cgt_boxes, cgt_ids, cfg.label_gate,
                      fr.refs, cfg.bind_gate)
    vb, vc, graw, glog, vnm = detection_loss(raw, logits, fr.refs, assign, cgt_boxes, cgt_labels, cfg)

    gM, gS = model.vehicle.decode_backward(dcache, graw, glog)
    gMV, gSV, gMa, gSa = model.agg.backward(cagg, gM, gS)
    # message reference points are infra-decoded centres: boxes = refs + raw[:, :3], so the
    # vehicle box loss and the GBA edge features both reach the infra regression head
    gpI = np.zeros((len(rows), 3))
    um = cagg[2]
    gpI[um] += graw[len(vids):, :3]
    if galogit.size:
        g = model.gba.backward(cgba, cfg.lambda_asso * galogit, positions=True)
        gMV, gSV, gMa, gSa = gMV + g[0], gSV + g[1], gMa + g[2], gSa + g[3]
        gpI += g[5]
    gMI, gSI = model.caa.backward(ccaa, gMa, gSa)
    model.vehicle.mdfe.backward(vframe.cache, gMV, gSV)
    igraw[rows, :3] += gpI @ pose.R
    igM, igS = model.infra.decode_backward(iframe.dcache, igraw, iglog)
    igM[rows] += gMI
    igS[rows] += gSI
    model.infra.mdfe.backward(iframe.cache, igM, igS)

    ego = scenario.ego_motion(t) if t + 1 < scenario.n_frames else None
    probs = sigmoid(logits)
    vnext = _advance_training(vstate, row_track, fr.feats, boxes, probs, assign, cgt_ids, cfg, scenario.dt, ego)
    inext = _advance_training(istate, iframe.out.decoder.track_ids, iframe.features, iframe.boxes,
                              iframe.probs, iassign, igt[2], cfg, scenario.dt, None)
    rep = LossReport(vb + ib, vc + ic, l_asso, (cfg.lambda_bbx, cfg.lambda_cls, cfg.lambda_asso),
                     vnm + inm, int((labels.labels == POSITIVE).sum()))
    return rep, vnext, inext


# --------------------------------------------------------------------------
# loops


def _schedule(scenarios, epochs: int, seed: int):
    rng = np.random.default_rng([seed, 17])
    for epoch in range(epochs):
        for i in rng.permutation(len(scenarios)):
            yield epoch, scenarios[int(i)]


def _run(model: CoopTrackModel, scenarios, epochs: int, seed: int, cfg: Config, names, frame_fn, init_fn,
         max_steps: int = None, log_every: int = 1) -> TrainResult:
    if not scenarios:
        raise ConfigurationError("training needs at least one scenario")
    if epochs <= 0:
        raise ConfigurationError("epochs must be positive")
    store = model.store
    total = epochs * sum(s.n_frames for s in scenarios)
    if max_steps is not None:
        total = min(total, max_steps)
    res = TrainResult()
    start = store.step
    for epoch, sc in _schedule(scenarios, epochs, seed):
        states = init_fn()
        for t in range(sc.n_frames):
            if res.steps >= total:
                return res
            store.zero_grad()
            rep, *states = frame_fn(sc, t, *states, 1000 * seed + epoch)
            _check_finite(rep, start + res.steps)
            lr = cosine_lr(res.steps, total, cfg.lr)
            adamw_step(store, lr, cfg.weight_decay, names=names, max_grad_norm=cfg.max_grad_norm)
            res.steps += 1
            res.losses.append(rep)
            if res.steps % log_every == 0:
                res.log.append((store.step, lr, rep.l_bbx, rep.l_cls, rep.l_asso, rep.total))
    return res


def stage1_train(model: CoopTrackModel, kind: str, scenarios, epochs: int = None, seed: int = 0,
                 cfg: Config = None, max_steps: int = None) -> TrainResult:
    """Train one agent's extractor and heads alone."""
    cfg = cfg or model.cfg
    epochs = cfg.epochs_stage1 if epochs is None else epochs
    agent = model.agent(kind)
    names = model.store.names(agent.prefix + ".")

    def frame_fn(sc, t, state, det_seed):
        rep, nxt = stage1_frame(model, kind, sc, t, state, det_seed, cfg)
        return rep, nxt

    return _run(model, scenarios, epochs, seed, cfg, names, frame_fn, lambda: [new_agent_state(agent)], max_steps)


def stage2_train(model: CoopTrackModel, scenarios, epochs: int = None, seed: int = 0, cfg: Config = None,
                 max_steps: int = None) -> TrainResult:
    """Cooperative fine-tuning of everything (or only the coop. modules when frozen)."""
    cfg = cfg or model.cfg
    epochs = cfg.epochs_stage2 if epochs is None else epochs
    names = model.store.names("coop.") if cfg.freeze_stage1 else model.store.names()

    def frame_fn(sc, t, vstate, istate, det_seed):
        return stage2_frame(model, sc, t, vstate, istate, det_seed, cfg)

    return _run(model, scenarios, epochs, seed, cfg, names, frame_fn,
                lambda: [new_agent_state(model.vehicle), new_agent_state(model.infra)], max_steps)


def train_stages(model: CoopTrackModel, scenarios, cfg: Config = None, seed: int = 0,
                 epochs_stage1: int = None, epochs_stage2: int = None):
    """Stage 1 for both agents, then stage 2. Returns {stage: [TrainResult, ...]}."""
    cfg = cfg or model.cfg
    s1 = [stage1_train(model, kind, scenarios, epochs_stage1, seed, cfg) for kind in ("vehicle", "infra")]
    s2 = stage2_train(model, scenarios, epochs_stage2, seed, cfg)
    return {1: s1, 2: [s2]}


def merge_results(results) -> TrainResult:
    out = TrainResult()
    for r in results:
        out.losses += r.losses
        out.log += r.log
        out.steps += r.steps
    return out


def write_loss_csv(result: TrainResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "L_bbx", "L_cls", "L_asso", "total"])
        for row in result.log:
            w.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


# --------------------------------------------------------------------------
# stand-alone alignment training


def alignment_pairs(scenarios, frames=None):
    """(infra latent, vehicle latent, vehicle<-infra pose) for every object both agents see."""
    out = []
    for sc in scenarios:
        d = sc.spec.feature_dim
        emb = embedder(d)
        for t in (range(sc.n_frames) if frames is None else frames):
            boxes, labels, ids = sc.world_boxes(t)
            vis = visible_mask_both(sc, t)
            if not vis.any():
                continue
            lat = {}
            for kind in ("vehicle", "infra"):
                ag = sc.agent(kind)
                local = transform_boxes(boxes[vis], ag.poses[t].inverse())
                lat[kind] = emb(labels[vis], local[:, 3:6], local[:, 6]) @ ag.D.T + ag.e
            pose = sc.vehicle.poses[t].inverse().compose(sc.infra.poses[t])
            out.append((lat["infra"], lat["vehicle"], pose))
    return out


def visible_mask_both(sc, t):
    return visible_mask(sc.vehicle, sc, t) & visible_mask(sc.infra, sc, t)


def alignment_residual(caa: CrossAgentAlignment, pairs) -> float:
    """mean ||aligned infra - vehicle|| / mean ||infra - vehicle||."""
    num = den = 0.0
    for fI, fV, pose in pairs:
        al, _ = caa.forward(InstanceFeatures(fI, fI), pose)
        num += np.linalg.norm(al.S - fV, axis=1).sum() + np.linalg.norm(al.M - fV, axis=1).sum()
        den += 2 * np.linalg.norm(fI - fV, axis=1).sum()
    return num / max(den, 1e-12)


def train_alignment(caa: CrossAgentAlignment, store, pairs, steps: int = 2000, lr: float = 3e-3,
                    seed: int = 0, prefix: str = None) -> list:
    """Fit both latent transforms to map infra latents onto vehicle latents (mean squared error)."""
    if not pairs:
        raise ConfigurationError("alignment training needs at least one pair")
    rng = np.random.default_rng([seed, 23])
    names = store.names(prefix) if prefix else None
    hist = []
    for i in range(steps):
        fI, fV, pose = pairs[int(rng.integers(len(pairs)))]
        store.zero_grad()
        al, cache = caa.forward(InstanceFeatures(fI, fI), pose)
        n = len(fI)
        gM = 2 * (al.M - fV) / n
        gS = 2 * (al.S - fV) / n
        caa.backward(cache, gM, gS)
        adamw_step(store, cosine_lr(i, steps, lr), 0.0, names=names, max_grad_norm=10.0)
        hist.append(float(((al.M - fV) ** 2).sum() / n))
    return hist

