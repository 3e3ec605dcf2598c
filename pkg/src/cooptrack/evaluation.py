"""Tracking and detection metrics, transmission cost and robustness sweeps.

Frames are plain tuples so the metrics can run on serialized outputs:
predictions ``(boxes (N, 9), scores (N,), ids (N,))`` and ground truth
``(boxes (M, 9), ids (M,))``, both in the same (vehicle) frame.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .benchmark import coop_gt, in_range
from .config import Config
from .fusion import dense_grid_bytes
from .geometry import THETA, VX, VY, normalize_angle
from .numerics import hungarian
from .tracker import CoopTrackModel, StepOptions, run_scenario

RECALL_THRESHOLDS = np.linspace(0.1, 1.0, 40)
AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
MT_RATIO, ML_RATIO = 0.8, 0.2


def _bev_dist(a, b) -> np.ndarray:
    a, b = np.asarray(a).reshape(-1, 9), np.asarray(b).reshape(-1, 9)
    return np.linalg.norm(a[:, None, :2] - b[None, :, :2], axis=-1)


# --------------------------------------------------------------------------
# detection matching and AP


def match_frame(pred_boxes, pred_scores, gt_boxes, radius: float):
    """Greedy matching in descending score order, each prediction to the closest free GT within radius.

    Returns (list of (pred index, gt index, distance), unmatched preds, unmatched GTs).
    """
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    dist = _bev_dist(pred_boxes, gt_boxes)
    taken = np.zeros(dist.shape[1], dtype=bool)
    tps, fps = [], []
    for p in np.argsort(-pred_scores, kind="stable"):
        best, best_d = -1, math.inf
        for g in range(dist.shape[1]):
            if not taken[g] and dist[p, g] <= radius and dist[p, g] < best_d:
                best, best_d = g, dist[p, g]
        if best < 0:
            fps.append(int(p))
        else:
            taken[best] = True
            tps.append((int(p), best, float(best_d)))
    return tps, fps, [int(g) for g in np.flatnonzero(~taken)]


def _ap_curve(frames_pred, frames_gt, radius: float):
    """Pooled score-ordered matching; returns (sorted tp flags, scores, (pred, gt) pairs, n gt)."""
    entries = []
    for f, (pb, ps, _) in enumerate(frames_pred):
        for i, s in enumerate(ps):
            entries.append((-float(s), f, i))
    entries.sort()
    taken = [np.zeros(len(g[1]), dtype=bool) for g in frames_gt]
    dists = [_bev_dist(p[0], g[0]) for p, g in zip(frames_pred, frames_gt)]
    tp, pairs = [], []
    for _, f, i in entries:
        d = dists[f][i] if dists[f].size else np.zeros(0)
        cand = np.flatnonzero((~taken[f]) & (d <= radius))
        if len(cand):
            g = cand[np.argmin(d[cand])]
            taken[f][g] = True
            tp.append(True)
            pairs.append((f, i, int(g)))
        else:
            tp.append(False)
    npos = sum(len(g[1]) for g in frames_gt)
    return np.array(tp, dtype=bool), pairs, npos


def average_precision(tp_flags, npos: int) -> float:
    """Area under the interpolated PR curve above the minimum recall and precision.

    The curve runs through the true-positive points only, where recall steps up,
    so it is a proper function of recall; past the last one precision is 0.
    """
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if npos == 0 or not tp_flags.any():
        return 0.0
    tp = np.cumsum(tp_flags).astype(float)
    prec = (tp / np.arange(1, len(tp_flags) + 1))[tp_flags]
    rec = tp[tp_flags] / npos
    grid = np.arange(101) / 100.0  # exact knots: linspace puts 0.7 a hair above 7/10
    p = np.interp(grid, rec, prec, right=0.0)
    p = p[int(round(100 * MIN_RECALL)) + 1:] - MIN_PRECISION
    p[p < 0] = 0.0
    return float(min(1.0, np.mean(p) / (1.0 - MIN_PRECISION)))


def _iou_aligned(a, b) -> float:
    inter = np.prod(np.minimum(a[3:6], b[3:6]))
    return float(inter / (np.prod(a[3:6]) + np.prod(b[3:6]) - inter))


def map_detection(frames_pred, frames_gt):
    """(mAP, ATE, ASE, AOE, AVE, AP per threshold). GT frames are (boxes, ids)."""
    aps = {}
    for r in AP_THRESHOLDS:
        flags, _, npos = _ap_curve(frames_pred, frames_gt, r)
        aps[r] = average_precision(flags, npos)
    _, pairs, _ = _ap_curve(frames_pred, frames_gt, TP_THRESHOLD)
    errs = {"ATE": [], "ASE": [], "AOE": [], "AVE": []}
    for f, i, g in pairs:
        p, q = np.asarray(frames_pred[f][0])[i], np.asarray(frames_gt[f][0])[g]
        errs["ATE"].append(float(np.linalg.norm(p[:2] - q[:2])))
        errs["ASE"].append(1.0 - _iou_aligned(p, q))
        errs["AOE"].append(abs(float(normalize_angle(p[THETA] - q[THETA]))))
        errs["AVE"].append(float(np.linalg.norm(p[VX:VY + 1] - q[VX:VY + 1])))
    tp_err = {k: (float(np.mean(v)) if v else 1.0) for k, v in errs.items()}
    return float(np.mean(list(aps.values()))), tp_err["ATE"], tp_err["ASE"], tp_err["AOE"], tp_err["AVE"], aps


# --------------------------------------------------------------------------
# tracking


@dataclass
class MOTCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    n_gt: int = 0
    dist_sum: float = 0.0
    mt: int = 0
    ml: int = 0
    n_tracks: int = 0

    @property
    def mota(self) -> float:
        return 1.0 - (self.fn + self.fp + self.ids) / self.n_gt if self.n_gt else float("nan")

    @property
    def motp(self) -> float:
        return self.dist_sum / self.tp if self.tp else float("nan")


def clear_mot(sequences_pred, sequences_gt, radius: float, threshold: float = -math.inf) -> MOTCounts:
    """CLEAR-MOT accumulation over sequences.

    Existing correspondences are kept while within ``radius``; the rest are
    assigned by Hungarian on BEV distance. An id switch is a GT matched to a
    different prediction id than the one it was last matched to.
    """
    c = MOTCounts()
    for preds, gts in zip(sequences_pred, sequences_gt):
        last = {}
        coverage = {}
        for (pb, ps, pid), (gb, gid) in zip(preds, gts):
            keep = np.asarray(ps) >= threshold
            pb, pid = np.asarray(pb).reshape(-1, 9)[keep], np.asarray(pid)[keep]
            gid = np.asarray(gid)
            dist = _bev_dist(pb, gb)
            pmatch = {}
            gfree = set(range(len(gid)))
            pfree = set(range(len(pid)))
            pidx = {int(v): k for k, v in enumerate(pid)}
            for g in range(len(gid)):
                prev = last.get(int(gid[g]))
                if prev is not None and prev in pidx and pidx[prev] in pfree and dist[pidx[prev], g] <= radius:
                    pmatch[g] = pidx[prev]
                    gfree.discard(g)
                    pfree.discard(pidx[prev])
            gl, pl = sorted(gfree), sorted(pfree)
            if gl and pl:
                sub = dist[np.ix_(pl, gl)]
                cost = np.where(sub <= radius, sub, 1e6)
                for r, k in hungarian(cost).pairs:
                    if sub[r, k] <= radius:
                        pmatch[gl[k]] = pl[r]
            for g, p in pmatch.items():
                gk, pk = int(gid[g]), int(pid[p])
                if gk in last and last[gk] != pk:
                    c.ids += 1
                last[gk] = pk
                c.dist_sum += float(dist[p, g])
            for g in range(len(gid)):
                cov = coverage.setdefault(int(gid[g]), [0, 0])
                cov[0] += 1
                cov[1] += int(g in pmatch)
            c.tp += len(pmatch)
            c.fp += len(pid) - len(pmatch)
            c.fn += len(gid) - len(pmatch)
            c.n_gt += len(gid)
        for seen, hit in coverage.values():
            c.n_tracks += 1
            c.mt += int(hit / seen >= MT_RATIO)
            c.ml += int(hit / seen < ML_RATIO)
    return c


def score_thresholds(sequences_pred, sequences_gt, radius: float, recalls=RECALL_THRESHOLDS):
    """Score cut-off reaching each recall target, NaN where unreachable."""
    _, pairs, npos = _ap_curve([f for s in sequences_pred for f in s], [f for s in sequences_gt for f in s], radius)
    frames = [f for s in sequences_pred for f in s]
    tp_scores = np.sort([float(np.asarray(frames[f][1])[i]) for f, i, _ in pairs])[::-1]
    out = np.full(len(recalls), np.nan)
    for k, r in enumerate(recalls):
        need = int(math.ceil(r * npos - 1e-9))
        if npos and 0 < need <= len(tp_scores):
            out[k] = tp_scores[need - 1]
    return out


@dataclass
class TrackingMetrics:
    amota: float
    amota_raw: float
    amotp: float
    ids: int
    mt: int
    ml: int
    motar: list = field(default_factory=list)


def amota(sequences_pred, sequences_gt, radius: float = 2.0) -> TrackingMetrics:
    """Recall-averaged MOTA with the recall-normalised MOTAR per threshold."""
    n_gt = sum(len(f[1]) for s in sequences_gt for f in s)
    if n_gt == 0:
        raise ValueError("no ground truth: AMOTA is undefined")
    thr = score_thresholds(sequences_pred, sequences_gt, radius)
    raw, clipped, motp = [], [], []
    best = None
    for r, th in zip(RECALL_THRESHOLDS, thr):
        if np.isnan(th):
            raw.append(0.0)
            clipped.append(0.0)
            motp.append(radius)
            continue
        c = clear_mot(sequences_pred, sequences_gt, radius, th)
        # normalise by the recall actually reached at this cut-off, which can exceed r on score ties
        rec = c.tp / c.n_gt
        v = 1.0 - (c.ids + c.fp + c.fn - (1.0 - rec) * c.n_gt) / (rec * c.n_gt) if c.tp else 0.0
        raw.append(v)
        clipped.append(max(0.0, v))
        motp.append(c.motp if c.tp else radius)
        # MOTAR peaks at low recall where almost nothing is tracked; report counts at the best MOTA instead
        if best is None or c.mota > best[0]:
            best = (c.mota, c)
    c = best[1] if best is not None else clear_mot(sequences_pred, sequences_gt, radius)
    return TrackingMetrics(float(np.mean(clipped)), float(np.mean(raw)), float(np.mean(motp)), c.ids, c.mt, c.ml,
                           clipped)


# --------------------------------------------------------------------------
# transmission cost


def transmission_cost(message_sizes, rate_hz: float) -> float:
    """Mean bytes per frame times the frame rate."""
    sizes = [len(m) if isinstance(m, (bytes, bytearray)) else int(m) for m in message_sizes]
    if not sizes:
        return 0.0
    return float(np.mean(sizes) * rate_hz)


def dense_grid_bps(d: int, rate_hz: float, grid: int = 200) -> float:
    return float(dense_grid_bytes(d, grid) * rate_hz)


# --------------------------------------------------------------------------
# benchmark runner


@dataclass
class MetricReport:
    mode: str = ""
    amota: float = 0.0
    amota_raw: float = 0.0
    amotp: float = 0.0
    ids: int = 0
    mt: int = 0
    ml: int = 0
    map: float = 0.0
    ate: float = 0.0
    ase: float = 0.0
    aoe: float = 0.0
    ave: float = 0.0
    bps: float = 0.0
    ap: dict = field(default_factory=dict)
    motar: list = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("ap")
        d.pop("motar")
        for r, v in self.ap.items():
            d[f"ap@{r}"] = v
        return d


def frames_from_outputs(outputs, classes=(0,), horizontal_range=None):
    """FrameOutput list -> prediction tuples filtered by class and range."""
    frames = []
    for o in outputs:
        keep = np.isin(o.labels, classes)
        if horizontal_range is not None and len(o):
            keep &= in_range(o.boxes, horizontal_range)
        frames.append((o.boxes[keep], o.scores[keep], o.ids[keep]))
    return frames


def gt_frames(scenario, classes=(0,)):
    out = []
    for t in range(scenario.n_frames):
        boxes, labels, ids = coop_gt(scenario, t, ego_range=True)
        keep = np.isin(labels, classes)
        out.append((boxes[keep], ids[keep]))
    return out


def evaluate_outputs(all_outputs, scenarios, cfg: Config, mode: str = "") -> MetricReport:
    preds = [frames_from_outputs(o, cfg.eval_classes, cfg.vehicle_range) for o in all_outputs]
    gts = [gt_frames(s, cfg.eval_classes) for s in scenarios]
    tm = amota(preds, gts, cfg.eval_radius)
    m, ate, ase, aoe, ave, aps = map_detection([f for s in preds for f in s], [f for s in gts for f in s])
    sizes = [o.diagnostics.get("message_bytes", 0) for outs in all_outputs for o in outs]
    return MetricReport(mode, tm.amota, tm.amota_raw, tm.amotp, tm.ids, tm.mt, tm.ml, m, ate, ase, aoe, ave,
                        transmission_cost(sizes, cfg.rate_hz), aps, tm.motar)


def run_benchmark(model: CoopTrackModel, scenarios, opts: StepOptions = None, det_seed: int = 0):
    """(MetricReport, outputs per scenario)."""
    opts = opts or StepOptions()
    outs = [run_scenario(model, s, opts, det_seed) for s in scenarios]
    return evaluate_outputs(outs, scenarios, model.cfg, opts.mode), outs


def robustness_sweep(kind: str, levels, model: CoopTrackModel, scenarios, base: StepOptions = None,
                     det_seed: int = 0):
    """Re-run the benchmark per level. Latency levels are in milliseconds, rotation levels in radians."""
    if len(levels) == 0:
        raise ValueError("sweep needs at least one level")
    base = base or StepOptions()
    curve = []
    for lv in levels:
        lv = float(lv)
        if kind == "latency":
            opts = StepOptions(**{**asdict(base), "delay": lv / 1000.0})
        elif kind in ("rotation_noise", "rotation_noise_global"):
            opts = StepOptions(**{**asdict(base), "rot_sigma": lv,
                                  "rot_scope": "global" if kind.endswith("global") else base.rot_scope})
        elif kind == "no_infra":
            opts = StepOptions(**{**asdict(base), "zero_infra": bool(lv)})
        else:
            raise ValueError(f"unknown sweep kind {kind!r}")
        rep, _ = run_benchmark(model, scenarios, opts, det_seed)
        curve.append((lv, rep))
    return curve


def history_sweep(cfg: Config, levels, train_scenarios, eval_scenarios, seed: int = 0, mode: str = "coop",
                  epochs_stage1: int = None, epochs_stage2: int = None, det_seed: int = 0):
    """Retrain the full pipeline per history length and evaluate; returns [(tau, MetricReport)]."""
    from .training import train_stages
    if len(levels) == 0:
        raise ValueError("sweep needs at least one level")
    curve = []
    for tau in levels:
        if int(tau) != tau or tau < 0:
            raise ValueError(f"history length must be a non-negative integer, got {tau}")
        c = cfg.replace(tau=int(tau)).validate()
        model = CoopTrackModel(c, seed=seed)
        train_stages(model, train_scenarios, c, seed, epochs_stage1, epochs_stage2)
        rep, _ = run_benchmark(model, eval_scenarios, StepOptions(mode=mode), det_seed)
        curve.append((int(tau), rep))
    return curve


# --------------------------------------------------------------------------
# association quality


@dataclass
class AssociationQuality:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def distance_matches(pV, pI, gate: float = 2.0) -> list:
    """Baseline association: Hungarian on BEV centre distance with a hard gate."""
    if len(pV) == 0 or len(pI) == 0:
        return []
    dist = np.linalg.norm(np.asarray(pV)[:, None, :2] - np.asarray(pI)[None, :, :2], axis=-1)
    cost = np.where(dist <= gate, dist, 1e6)
    return [(r, c) for r, c in hungarian(cost).pairs if dist[r, c] <= gate]


def association_quality(model: CoopTrackModel, scenarios, label_gate: float = 2.0, baseline_gate: float = None,
                        det_seed: int = 0) -> AssociationQuality:
    """Pairwise precision/recall of the learned matcher (or the distance baseline) against GT labels."""
    from .training import POSITIVE, gen_assoc_labels
    q = AssociationQuality()
    for sc in scenarios:
        outs = run_scenario(model, sc, StepOptions(record=True), det_seed)
        for t, o in enumerate(outs):
            rec = o.diagnostics.get("record")
            if rec is None:
                continue
            fr = rec["fusion"]
            gt_boxes, _, gt_ids = coop_gt(sc, t)
            lab = gen_assoc_labels(rec["vehicle_boxes"], rec["infra_boxes"], gt_boxes, gt_ids, label_gate)
            pos = {(int(i), int(j)) for i, j in zip(*np.nonzero(lab.labels == POSITIVE))}
            if baseline_gate is None:
                pred = {(i, j) for i, j, _ in fr.matches.pairs}
            else:
                pred = set(distance_matches(rec["vehicle_refs"], fr.aligned_refs, baseline_gate))
            q.tp += len(pred & pos)
            q.fp += len(pred - pos)
            q.fn += len(pos - pred)
    return q


# --------------------------------------------------------------------------
# files


def write_report_csv(reports, path):
    rows = [r.row() for r in reports]
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_summary(reports, path, extra: dict = None):
    data = {"reports": [asdict(r) for r in reports]}
    for rep in data["reports"]:
        rep["ap"] = {str(k): v for k, v in rep["ap"].items()}
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
