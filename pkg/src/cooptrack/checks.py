"""Headless release checks: gradient checks, exact oracles and invariants.

Every check is registered under a ``module.op`` name so a failure points at
the operation that broke. ``run_checks`` times each one separately.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import evaluation, fusion, mdfe, numerics, scene, tracker, training
from .config import Config, dump_config, parse_config
from .geometry import BOX_DIM, Pose, axis_angle_matrix, transform_boxes

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3
GRAD_FLOOR = 1e-5  # below this norm errors are absolute: central differences carry ~1e-10 round-off


@dataclass
class CheckResult:
    name: str
    group: str
    ok: bool
    seconds: float
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<36} {self.seconds:7.2f}s  {self.detail}"


_REGISTRY: list[tuple[str, str, callable]] = []


def check(name: str, group: str):
    def wrap(fn):
        _REGISTRY.append((name, group, fn))
        return fn
    return wrap


def registered(group: str = None) -> list[str]:
    return [n for n, g, _ in _REGISTRY if group is None or g == group]


def run_checks(names=None, group: str = None) -> list[CheckResult]:
    out = []
    for name, grp, fn in _REGISTRY:
        if names is not None and name not in names:
            continue
        if group is not None and grp != group:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure of that check, not of the run
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, grp, bool(ok), time.perf_counter() - t0, detail))
    return out


def format_report(results) -> str:
    lines = [r.line() for r in results]
    n_bad = sum(not r.ok for r in results)
    total = sum(r.seconds for r in results)
    lines.append(f"{len(results) - n_bad}/{len(results)} checks passed in {total:.1f}s")
    if n_bad:
        lines.append("failed: " + ", ".join(r.name for r in results if not r.ok))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# gradient checking helpers


def _rng(tag: int):
    return np.random.default_rng([20250101, tag])


def _jitter(store, rng, scale: float = 0.2, prefix: str = ""):
    """Move every parameter off its initialisation so zero-initialised layers still pass gradient."""
    for n in store.names(prefix):
        store.params[n] += rng.normal(0.0, scale, size=store.params[n].shape)


def _compare(num, ana):
    num, ana = np.ravel(num), np.ravel(ana)
    scale = max(np.linalg.norm(num), np.linalg.norm(ana))
    return float(np.linalg.norm(num - ana) / max(scale, GRAD_FLOOR))


def grad_case(store, loss_fn, backward_fn, inputs=(), tol=OP_TOL, probes=8, seed=0, prefix=""):
    """Central differences against the hand-written backward.

    ``loss_fn()`` returns the scalar loss; ``backward_fn()`` runs forward and
    backward from a zeroed store and returns gradients for ``inputs``. Every
    parameter under ``prefix`` and every input is probed at up to ``probes``
    random entries.
    """
    rng = _rng(seed)
    store.zero_grad()
    gin = backward_fn()
    targets = [(n, store.params[n], store.grads[n].copy()) for n in store.names(prefix)]
    targets += [(f"input[{i}]", x, np.asarray(g)) for i, (x, g) in enumerate(zip(inputs, gin or ()))]
    worst, where = 0.0, ""
    for name, arr, ana in targets:
        if arr.size == 0:
            continue
        idx = rng.choice(arr.size, size=min(probes, arr.size), replace=False)
        num = numerics.numeric_grad(loss_fn, arr, idx=idx).reshape(-1)[idx]
        err = _compare(num, ana.reshape(-1)[idx])
        if err > worst:
            worst, where = err, name
    ok = worst < tol
    return ok, f"max rel err {worst:.1e}" + (f" at {where}" if where else "") + f" (tol {tol:g})"


def _weighted(y, G):
    return float(np.sum(y * G))


# --------------------------------------------------------------------------
# numerics


@check("numerics.Linear", "gradient")
def _linear():
    rng = _rng(1)
    store = numerics.ParamStore()
    lin = numerics.Linear(store, "l", 5, 4, rng)
    x, G = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
    loss = lambda: _weighted(lin.forward(x)[0], G)

    def bwd():
        _, c = lin.forward(x)
        return [lin.backward(c, G)]
    return grad_case(store, loss, bwd, [x])


@check("numerics.MLP", "gradient")
def _mlp():
    rng = _rng(2)
    store = numerics.ParamStore()
    mlp = numerics.MLP(store, "m", [6, 8, 8, 3], rng)
    x, G = rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
    loss = lambda: _weighted(mlp.forward(x)[0], G)

    def bwd():
        _, c = mlp.forward(x)
        return [mlp.backward(c, G)]
    return grad_case(store, loss, bwd, [x])


@check("numerics.LayerNorm", "gradient")
def _layernorm():
    rng = _rng(3)
    store = numerics.ParamStore()
    ln = numerics.LayerNorm(store, "ln", 6)
    _jitter(store, rng)
    x, G = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    loss = lambda: _weighted(ln.forward(x)[0], G)

    def bwd():
        _, c = ln.forward(x)
        return [ln.backward(c, G)]
    return grad_case(store, loss, bwd, [x])


@check("numerics.MultiHeadAttention", "gradient")
def _attention():
    rng = _rng(4)
    store = numerics.ParamStore()
    att = numerics.MultiHeadAttention(store, "a", 8, 2, rng)
    _jitter(store, rng, 0.1)
    xq, xkv = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 4, 8))
    mask = rng.random((2, 3, 4)) < 0.6
    mask[..., 0] = True
    G = rng.normal(size=(2, 3, 8))
    loss = lambda: _weighted(att.forward(xq, xkv, mask)[0], G)

    def bwd():
        _, c = att.forward(xq, xkv, mask)
        return list(att.backward(c, G))
    return grad_case(store, loss, bwd, [xq, xkv])


@check("numerics.sigmoid_focal_loss", "gradient")
def _focal():
    rng = _rng(5)
    z = rng.normal(0, 2, size=(6, 3))
    t = (rng.random((6, 3)) < 0.4).astype(float)
    worst = 0.0
    for alpha, gamma in ((0.25, 2.0), (0.5, 1.0)):
        loss = lambda: float(numerics.sigmoid_focal_loss(z, t, alpha, gamma)[0].sum())
        ana = numerics.sigmoid_focal_loss(z, t, alpha, gamma)[1]
        worst = max(worst, _compare(numerics.numeric_grad(loss, z), ana))
        # probability-space form agrees with the logit form
        ref = numerics.focal_loss(numerics.sigmoid(z), t, alpha, gamma)
        worst = max(worst, float(np.abs(np.sum(ref) - loss()) / max(abs(loss()), 1e-12)))
    return worst < OP_TOL, f"max rel err {worst:.1e}"


@check("numerics.l1_loss", "gradient")
def _l1():
    rng = _rng(6)
    p, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    err = _compare(numerics.numeric_grad(lambda: numerics.l1_loss(p, t), p), numerics.l1_loss_grad(p, t))
    return err < OP_TOL, f"rel err {err:.1e}"


# --------------------------------------------------------------------------
# mdfe


@check("mdfe.SemanticHead", "gradient")
def _semantic():
    rng = _rng(7)
    store = numerics.ParamStore()
    head = mdfe.SemanticHead(store, "s", 8, rng)
    Q, G = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    loss = lambda: _weighted(head.forward(Q)[0], G)

    def bwd():
        _, c = head.forward(Q)
        return [head.backward(c, G)]
    return grad_case(store, loss, bwd, [Q])


@check("mdfe.motion_head", "gradient")
def _motion():
    rng = _rng(8)
    store = numerics.ParamStore()
    mlp = numerics.MLP(store, "m", [5, 8, 8], rng)
    P, G = rng.normal(size=(3, 8, 5)), rng.normal(size=(3, 8))
    loss = lambda: _weighted(mdfe.motion_head(mlp, P)[0], G)

    def bwd():
        _, c = mdfe.motion_head(mlp, P)
        return [mdfe.motion_head_backward(mlp, c, G)]
    return grad_case(store, loss, bwd, [P])


@check("mdfe.TemporalBlock", "gradient")
def _temporal():
    rng = _rng(9)
    store = numerics.ParamStore()
    blk = mdfe.TemporalBlock(store, "t", 8, 3, rng, n_heads=2, ff_mult=2)
    _jitter(store, rng, 0.1)
    x, hist, G = rng.normal(size=(4, 8)), rng.normal(size=(4, 3, 8)), rng.normal(size=(4, 8))
    mask = np.array([[1, 1, 0], [1, 0, 0], [0, 0, 0], [1, 1, 1]], dtype=bool)
    loss = lambda: _weighted(blk.forward(x, hist, mask)[0], G)

    def bwd():
        _, c = blk.forward(x, hist, mask)
        return [blk.backward(c, G)]
    return grad_case(store, loss, bwd, [x])


def _toy_frame(rng, d: int, n_dets: int = 5, n_tracks: int = 3, n_fresh: int = 4):
    boxes = np.zeros((n_dets, BOX_DIM))
    boxes[:, :2] = rng.uniform(-20, 20, size=(n_dets, 2))
    boxes[:, 2] = 0.8
    boxes[:, 3:6] = [1.9, 4.5, 1.6]
    boxes[:, 6] = rng.uniform(-np.pi, np.pi, n_dets)
    boxes[:, 7:9] = rng.normal(0, 3, size=(n_dets, 2))
    dets = scene.Detections(boxes, np.zeros(n_dets, int), rng.uniform(0.3, 0.9, n_dets),
                            rng.normal(size=(n_dets, d)), np.arange(n_dets))
    tb = boxes[:n_tracks].copy()
    tb[:, :2] += rng.normal(0, 0.5, size=(n_tracks, 2))
    refs = np.concatenate([tb[:, :3], np.c_[rng.uniform(-20, 20, (n_fresh, 2)), np.full(n_fresh, 0.8)]])
    hist = mdfe.HistoryBuffer(3, d)
    hist = mdfe.history_update(hist, rng.normal(size=(2, d)), rng.normal(size=(2, d)), [10, 11])
    hist = mdfe.history_update(hist, rng.normal(size=(2, d)), rng.normal(size=(2, d)), [10, 11])
    return dets, tb, refs, hist


@check("mdfe.MDFE", "gradient")
def _mdfe_composite():
    rng = _rng(10)
    d = 8
    store = numerics.ParamStore()
    model = mdfe.MDFE(store, "x", d, 3, rng, n_heads=2, ff_mult=2)
    _jitter(store, rng, 0.05)
    dets, tb, refs, hist = _toy_frame(rng, d)
    nt, nf = len(tb), len(refs) - len(tb)
    track_feats = rng.normal(size=(nt, d))
    GM, GS = rng.normal(size=(nt + nf, d)), rng.normal(size=(nt + nf, d))

    def queries():
        feats = np.concatenate([track_feats, np.tile(model.fresh_query, (nf, 1))])
        boxes = np.concatenate([tb, np.zeros((nf, BOX_DIM))])
        return mdfe.QuerySet(feats, refs, np.r_[np.ones(nt, bool), np.zeros(nf, bool)],
                             np.r_[10, 11, 12, -np.ones(nf, int)], boxes, np.zeros(nt + nf, int))

    def loss():
        out, _ = model.forward(dets, queries(), hist)
        n = len(out.features)
        return _weighted(out.features.M, GM[:n]) + _weighted(out.features.S, GS[:n])

    def bwd():
        out, c = model.forward(dets, queries(), hist)
        n = len(out.features)
        model.backward(c, GM[:n], GS[:n])
    return grad_case(store, loss, bwd, tol=COMPOSITE_TOL, probes=4)


# --------------------------------------------------------------------------
# fusion


def _pose(rng) -> Pose:
    axis = rng.normal(size=3)
    R = axis_angle_matrix(axis / np.linalg.norm(axis), rng.uniform(-0.4, 0.4)) @ axis_angle_matrix([0, 0, 1], rng.uniform(-np.pi, np.pi))
    return Pose(R, rng.uniform(-30, 30, size=3))


@check("fusion.LatentTransformHead", "gradient")
def _ltf_head():
    rng = _rng(11)
    store = numerics.ParamStore()
    head = fusion.LatentTransformHead(store, "h", 8, 4, rng, hidden=16)
    _jitter(store, rng, 0.1)
    code = fusion.encode_pose(_pose(rng))
    GR, Gt = rng.normal(size=(8, 8)), rng.normal(size=8)
    # only the block-diagonal part of R is a function of the parameters
    GR = GR * (fusion.block_diag(np.ones((2, 4, 4))) > 0)

    def loss():
        tf, _ = head.forward(code)
        return _weighted(tf.R, GR) + _weighted(tf.t, Gt)

    def bwd():
        _, c = head.forward(code)
        head.backward(c, GR, Gt)
    return grad_case(store, loss, bwd)


@check("fusion.latent_map", "gradient")
def _latent_map():
    rng = _rng(12)
    X, R, t, G = rng.normal(size=(5, 8)), rng.normal(size=(8, 8)), rng.normal(size=8), rng.normal(size=(5, 8))
    tf = fusion.LatentTransform(R, t, 4)
    loss = lambda: _weighted(fusion.latent_map(X, tf), G)
    gX, gR, gt = fusion.latent_map_backward(X, tf, G)
    worst = max(_compare(numerics.numeric_grad(loss, a), g) for a, g in ((X, gX), (R, gR), (t, gt)))
    return worst < OP_TOL, f"max rel err {worst:.1e}"


@check("fusion.CrossAgentAlignment", "gradient")
def _caa():
    rng = _rng(13)
    store = numerics.ParamStore()
    caa = fusion.CrossAgentAlignment(store, "c", 8, 4, rng, hidden=16)
    _jitter(store, rng, 0.1)
    M, S = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    pose = _pose(rng)
    GM, GS = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))

    def loss():
        out, _ = caa.forward(mdfe.InstanceFeatures(M, S), pose)
        return _weighted(out.M, GM) + _weighted(out.S, GS)

    def bwd():
        _, c = caa.forward(mdfe.InstanceFeatures(M, S), pose)
        return list(caa.backward(c, GM, GS))
    return grad_case(store, loss, bwd, [M, S])


@check("fusion.GraphAssociation", "gradient")
def _gba():
    rng = _rng(14)
    store = numerics.ParamStore()
    gba = fusion.GraphAssociation(store, "g", 8, rng)
    fv = [rng.normal(size=(4, 8)), rng.normal(size=(4, 8))]
    fi = [rng.normal(size=(3, 8)), rng.normal(size=(3, 8))]
    pV, pI = rng.uniform(-20, 20, (4, 3)), rng.uniform(-20, 20, (3, 3))
    G = rng.normal(size=(4, 3))

    def fwd():
        return gba.forward(mdfe.InstanceFeatures(*fv), mdfe.InstanceFeatures(*fi), pV, pI)

    loss = lambda: _weighted(fwd()[0].logits, G)

    def bwd():
        _, c = fwd()
        return list(gba.backward(c, G, positions=True))
    return grad_case(store, loss, bwd, [fv[0], fv[1], fi[0], fi[1], pV, pI])


@check("fusion.Aggregator", "gradient")
def _aggregator():
    rng = _rng(15)
    store = numerics.ParamStore()
    agg = fusion.Aggregator(store, "a", 8, rng)
    _jitter(store, rng, 0.1)
    fv = [rng.normal(size=(4, 8)), rng.normal(size=(4, 8))]
    fi = [rng.normal(size=(3, 8)), rng.normal(size=(3, 8))]
    pV, pI = rng.uniform(-20, 20, (4, 3)), rng.uniform(-20, 20, (3, 3))
    ms = fusion.MatchSet([(0, 1, 0.9), (2, 0, 0.7)], [1, 3], [2])
    GM, GS = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))

    def fwd():
        return agg.forward(ms, mdfe.InstanceFeatures(*fv), mdfe.InstanceFeatures(*fi), pV, pI)

    def loss():
        out, _ = fwd()
        return _weighted(out.features.M, GM) + _weighted(out.features.S, GS)

    def bwd():
        _, c = fwd()
        return list(agg.backward(c, GM, GS))
    return grad_case(store, loss, bwd, [fv[0], fv[1], fi[0], fi[1]])


# --------------------------------------------------------------------------
# tracker and training


def _small_cfg(**kw) -> Config:
    base = dict(d=16, tau=2, n_fresh=8, duration_s=0.6, n_objects=10, n_scenarios=2, n_train=1)
    base.update(kw)
    return Config(**base).validate()


@check("tracker.decode_heads", "gradient")
def _decode_heads():
    rng = _rng(16)
    model = tracker.CoopTrackModel(_small_cfg(), seed=3)
    agent = model.vehicle
    M, S = rng.normal(size=(5, 16)), rng.normal(size=(5, 16))
    refs = rng.normal(size=(5, 3))
    G1, G2 = rng.normal(size=(5, tracker.REG_DIM)), rng.normal(size=(5, 3))

    def loss():
        raw, logits, _ = agent.decode_forward(M, S, refs)
        return _weighted(raw, G1) + _weighted(logits, G2)

    def bwd():
        _, _, c = agent.decode_forward(M, S, refs)
        return list(agent.decode_backward(c, G1, G2))
    ok1, d1 = grad_case(model.store, loss, bwd, [M, S], prefix="veh.reg")
    ok2, d2 = grad_case(model.store, loss, bwd, prefix="veh.cls")
    return ok1 and ok2, f"reg: {d1}; cls: {d2}"


@check("training.detection_loss", "gradient")
def _detection_loss():
    rng = _rng(17)
    cfg = Config()
    n, ng = 6, 3
    raw, logits = rng.normal(size=(n, tracker.REG_DIM)), rng.normal(size=(n, 3))
    refs = rng.normal(size=(n, 3))
    gt = np.zeros((ng, BOX_DIM))
    gt[:, :3] = rng.normal(size=(ng, 3))
    gt[:, 3:6] = rng.uniform(0.5, 4, size=(ng, 3))
    gt[:, 6] = rng.uniform(-np.pi, np.pi, ng)
    gt[:, 7:9] = rng.normal(size=(ng, 2))
    labels = np.array([0, 2, 1])
    assign = np.array([1, -1, 0, -1, 2, -1])

    def loss():
        b, c, *_ = training.detection_loss(raw, logits, refs, assign, gt, labels, cfg)
        return cfg.lambda_bbx * b + cfg.lambda_cls * c
    _, _, graw, glog, _ = training.detection_loss(raw, logits, refs, assign, gt, labels, cfg)
    worst = max(_compare(numerics.numeric_grad(loss, raw), graw), _compare(numerics.numeric_grad(loss, logits), glog))
    return worst < OP_TOL, f"max rel err {worst:.1e}"


@check("training.association_loss", "gradient")
def _association_loss():
    rng = _rng(18)
    cfg = Config()
    z = rng.normal(size=(4, 5))
    lab = rng.choice([training.POSITIVE, training.NEGATIVE, training.IGNORE], size=(4, 5))
    labels = training.AssociationLabels(lab, np.zeros(4, int), np.zeros(5, int))
    loss = lambda: training.association_loss(z, labels, cfg)[0]
    err = _compare(numerics.numeric_grad(loss, z), training.association_loss(z, labels, cfg)[1])
    return err < OP_TOL, f"rel err {err:.1e}"


def _warm_states(model, sc, cfg, n: int = 2):
    vs, ist = tracker.new_agent_state(model.vehicle), tracker.new_agent_state(model.infra)
    for t in range(n):
        model.store.zero_grad()
        _, vs, ist = training.stage2_frame(model, sc, t, vs, ist, 0, cfg)
    return vs, ist


def _composite_model(seed: int):
    cfg = _small_cfg()
    model = tracker.CoopTrackModel(cfg, seed=seed)
    _jitter(model.store, _rng(seed), 0.02)
    # push scores above sigma_keep so the message and the match set are not empty
    for agent in (model.vehicle, model.infra):
        model.store.params[agent.cls.layers[-1].bn][:] = 0.5
    from .benchmark import spec_from_config
    sc = scene.generate_scenario(spec_from_config(cfg), 4242)
    return cfg, model, sc


@check("training.stage1_frame", "gradient")
def _stage1_composite():
    cfg, model, sc = _composite_model(19)
    state = tracker.new_agent_state(model.vehicle)
    for t in range(2):
        _, state = training.stage1_frame(model, "vehicle", sc, t, state, 0, cfg)
    loss = lambda: training.stage1_frame(model, "vehicle", sc, 2, state, 0, cfg)[0].total
    return grad_case(model.store, loss, lambda: loss() and None, tol=COMPOSITE_TOL, probes=2, prefix="veh.")


@check("training.stage2_frame", "gradient")
def _stage2_composite():
    cfg, model, sc = _composite_model(20)
    vs, ist = _warm_states(model, sc, cfg)
    loss = lambda: training.stage2_frame(model, sc, 2, vs, ist, 0, cfg)[0].total
    ok, detail = grad_case(model.store, loss, lambda: loss() and None, tol=COMPOSITE_TOL, probes=2)
    model.store.zero_grad()
    rep = training.stage2_frame(model, sc, 2, vs, ist, 0, cfg)[0]
    if rep.l_asso == 0.0:
        return False, "composite did not exercise association (empty message or labels)"
    return ok, detail


# --------------------------------------------------------------------------
# oracles


@check("numerics.hungarian", "oracle")
def _hungarian():
    rng = _rng(21)
    bad = 0
    for k in range(120):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        tied = bool(k % 2)
        C = rng.integers(0, 10, size=(n, m)).astype(float) if tied else rng.random((n, m))
        a, b = numerics.hungarian(C), numerics.brute_force_assignment(C)
        # integer costs may tie between optima but their totals are exact; float optima are unique
        same = (sum(C[r, c] for r, c in sorted(a.pairs)) == sum(C[r, c] for r, c in sorted(b.pairs))) if tied \
            else sorted(a.pairs) == sorted(b.pairs)
        bad += int(not same or len(a.pairs) != min(n, m) or len({c for _, c in a.pairs}) != len(a.pairs))
    return bad == 0, f"{120 - bad}/120 matrices equal to brute force"


@check("numerics.rot6d", "oracle")
def _rot6d():
    rng = _rng(22)
    worst, orth = 0.0, 0.0
    for _ in range(1000):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        R = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                      [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                      [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
        worst = max(worst, float(np.abs(numerics.rot6d_decode(numerics.rot6d_encode(R)) - R).max()))
        D = numerics.rot6d_decode(rng.normal(size=6))
        orth = max(orth, float(np.abs(D.T @ D - np.eye(3)).max()), abs(np.linalg.det(D) - 1.0))
    return worst < 1e-9 and orth < 1e-9, f"round trip {worst:.1e}, orthonormality {orth:.1e}"


def metric_cases() -> dict:
    text = resources.files("cooptrack").joinpath("data/metric_cases.json").read_text()
    return {k: v for k, v in json.loads(text).items() if not k.startswith("_")}


def case_frames(case):
    """Fixture case -> (prediction frames, GT frames) in evaluation format."""
    def boxes(rows):
        out = np.zeros((len(rows), BOX_DIM))
        for i, r in enumerate(rows):
            out[i, :2] = r[:2]
            out[i, 2:6] = [0.8, 1.9, 4.5, 1.6]
        return out
    preds = [(boxes(f["pred"]), np.array([r[2] for r in f["pred"]], dtype=float),
              np.array([r[3] for r in f["pred"]], dtype=int)) for f in case["frames"]]
    gts = [(boxes(f["gt"]), np.array([r[2] for r in f["gt"]], dtype=int)) for f in case["frames"]]
    return preds, gts


@check("evaluation.fixtures", "oracle")
def _metric_fixtures():
    bad = []
    for name, case in metric_cases().items():
        preds, gts = case_frames(case)
        exp = case["expected"]
        got = {}
        if "amota" in exp or "ids" in exp:
            tm = evaluation.amota([preds], [gts], 2.0)
            c = evaluation.clear_mot([preds], [gts], 2.0)
            got.update(amota=tm.amota, ids=c.ids, tp=c.tp, fp=c.fp, fn=c.fn)
        if "map" in exp or "ap" in exp:
            m, *_, aps = evaluation.map_detection(preds, gts)
            got.update(map=m, ap={str(k): v for k, v in aps.items()})
        for k, v in exp.items():
            g = got[k]
            same = all(math.isclose(g[a], b, abs_tol=1e-12) for a, b in v.items()) if isinstance(v, dict) \
                else math.isclose(g, v, abs_tol=1e-12)
            if not same:
                bad.append(f"{name}.{k}={g} (want {v})")
    return not bad, "; ".join(bad) or f"{len(metric_cases())} fixture cases exact"


@check("fusion.attention_logits", "oracle")
def _gba_worked_example():
    one = np.ones((1, 1))
    x = fusion.attention_logits(2 * one, 3 * one, np.ones((1, 1, 1)), one, one, one)
    return float(x[0, 0, 0]) == 7.0, f"d=1 logit {float(x[0, 0, 0])}"


@check("fusion.wire_format", "oracle")
def _wire():
    rng = _rng(23)
    d, n = 32, 10
    msg = fusion.V2XMessage(rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=(n, 3)),
                            rng.random(n), rng.integers(0, 3, n), 5)
    buf = fusion.encode_message(msg)
    back = fusion.decode_message(buf, d)
    sizes = (fusion.instance_bytes(d), len(buf), fusion.BOX_RECORD_BYTES)
    exact = np.array_equal(back.M, msg.M.astype(np.float32)) and np.array_equal(back.labels, msg.labels)
    ok = sizes == (273, 4 + 10 * 273, 41) and exact
    return ok, f"instance {sizes[0]} B, frame {sizes[1]} B, box {sizes[2]} B, f32 round trip {'exact' if exact else 'BROKEN'}"


# --------------------------------------------------------------------------
# invariants


@check("config.round_trip", "invariant")
def _config_round_trip():
    cfg = Config(d=16, lr=3e-4, eval_classes=(0, 2), scenario_spec="x.json", seed=7)
    again = parse_config(dump_config(cfg))
    return again == cfg and dump_config(again) == dump_config(cfg), "parse . dump . parse"


@check("scene.noiseless_identity", "invariant")
def _noiseless():
    from .benchmark import spec_from_config
    cfg = _small_cfg(domain_gap=False)
    sc = scene.generate_scenario(spec_from_config(cfg, noiseless=True), 77)
    worst = 0.0
    for t in range(sc.n_frames):
        for agent in (sc.vehicle, sc.infra):
            det = scene.observe(agent, sc, t)
            wb, _, ids = sc.world_boxes(t)
            world = transform_boxes(det.boxes, agent.poses[t])
            row = {int(i): k for k, i in enumerate(ids)}
            ref = wb[[row[int(i)] for i in det.gt_ids]] if len(det) else np.zeros((0, BOX_DIM))
            if len(det):
                diff = np.abs(world - ref)
                diff[:, 6] = np.abs(np.angle(np.exp(1j * (world[:, 6] - ref[:, 6]))))
                worst = max(worst, float(diff.max()))
    return worst < 1e-9, f"max detection/GT deviation {worst:.1e}"


@check("tracker.empty_message_degeneracy", "invariant")
def _degeneracy():
    cfg = _small_cfg()
    model = tracker.CoopTrackModel(cfg, seed=5)
    from .benchmark import spec_from_config
    sc = scene.generate_scenario(spec_from_config(cfg), 99)
    a = tracker.run_scenario(model, sc, tracker.StepOptions(mode="no_fusion"))
    b = tracker.run_scenario(model, sc, tracker.StepOptions(mode="coop", zero_infra=True))
    same = all(np.array_equal(x.boxes, y.boxes) and np.array_equal(x.scores, y.scores)
               and np.array_equal(x.ids, y.ids) for x, y in zip(a, b))
    return same, "coop with empty messages is bit-identical to no_fusion" if same else "outputs differ"
