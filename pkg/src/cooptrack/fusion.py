"""Cross-agent alignment, graph-based association, matching and aggregation.

The infrastructure message is brought into the vehicle's latent space by a
pose-conditioned block-diagonal affine map, its reference points into the
vehicle frame by the rigid pose. A small graph-attention head scores every
vehicle/infrastructure pair; Hungarian matching on 1 - A picks the pairs
that are fused, everything else passes through.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .mdfe import InstanceFeatures
from .numerics import MLP, ConfigurationError, ParamStore, hungarian, rot6d_encode, sigmoid

POSE_CODE_SCALE = np.array([1.0] * 6 + [0.02] * 3)
EDGE_SCALE = 0.1


def encode_pose(pose: Pose) -> np.ndarray:
    """6D rotation code followed by the raw translation."""
    return np.concatenate([rot6d_encode(pose.R), pose.t])


def spatial_transform(points, pose: Pose) -> np.ndarray:
    return pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))


# --------------------------------------------------------------------------
# cross-agent alignment


@dataclass
class LatentTransform:
    R: np.ndarray  # (d, d), block diagonal
    t: np.ndarray  # (d,)
    block: int

    @classmethod
    def identity(cls, d: int, block: int = None) -> "LatentTransform":
        return cls(np.eye(d), np.zeros(d), block or d)


def block_diag(blocks: np.ndarray) -> np.ndarray:
    B, k, _ = blocks.shape
    out = np.zeros((B * k, B * k))
    for b in range(B):
        out[b * k:(b + 1) * k, b * k:(b + 1) * k] = blocks[b]
    return out


def diag_blocks(mat: np.ndarray, k: int) -> np.ndarray:
    B = mat.shape[0] // k
    return np.stack([mat[b * k:(b + 1) * k, b * k:(b + 1) * k] for b in range(B)])


class LatentTransformHead:
    """Two MLPs mapping a pose code to (block-diagonal R_hat, t_hat).

    R_hat = I + blockdiag(residual), so zero-initialised output layers give
    the identity transform.
    """

    def __init__(self, store: ParamStore, name: str, d: int, block: int, rng, hidden: int = 64):
        if d % block:
            raise ConfigurationError(f"latent dim {d} not divisible by block size {block}")
        self.d, self.k, self.B = d, block, d // block
        self.rot = MLP(store, name + ".rot", [9, hidden, self.B * block * block], rng, last_init="zeros")
        self.trans = MLP(store, name + ".trans", [9, hidden, d], rng, last_init="zeros")

    @property
    def rotation_outputs(self) -> int:
        return self.B * self.k * self.k

    def forward(self, pose_code):
        x = (np.asarray(pose_code, dtype=np.float64) * POSE_CODE_SCALE)[None]
        r, cr = self.rot.forward(x)
        t, ct = self.trans.forward(x)
        R = np.eye(self.d) + block_diag(r.reshape(self.B, self.k, self.k))
        return LatentTransform(R, t[0], self.k), (cr, ct)

    def backward(self, cache, gR, gt):
        cr, ct = cache
        self.rot.backward(cr, diag_blocks(gR, self.k).reshape(1, -1))
        self.trans.backward(ct, np.asarray(gt).reshape(1, -1))


def predict_latent_transform(pose_code, head: LatentTransformHead) -> LatentTransform:
    return head.forward(pose_code)[0]


def latent_map(X, tf: LatentTransform) -> np.ndarray:
    return X @ tf.R.T + tf.t


def latent_map_backward(X, tf: LatentTransform, g):
    """Returns (gX, gR, gt)."""
    return g @ tf.R, g.T @ X, g.sum(axis=0)


def caa_align(feats: InstanceFeatures, tf_motion: LatentTransform, tf_semantic: LatentTransform = None):
    tf_semantic = tf_motion if tf_semantic is None else tf_semantic
    return InstanceFeatures(latent_map(feats.M, tf_motion), latent_map(feats.S, tf_semantic))


class CrossAgentAlignment:
    """Separate latent transforms for motion and semantic features."""

    def __init__(self, store: ParamStore, name: str, d: int, block: int, rng, hidden: int = 64):
        self.motion = LatentTransformHead(store, name + ".m", d, block, rng, hidden)
        self.semantic = LatentTransformHead(store, name + ".s", d, block, rng, hidden)

    def forward(self, feats: InstanceFeatures, pose: Pose):
        code = encode_pose(pose)
        tm, cm = self.motion.forward(code)
        ts, cs = self.semantic.forward(code)
        out = caa_align(feats, tm, ts)
        return out, (feats, tm, ts, cm, cs)

    def backward(self, cache, gM, gS):
        feats, tm, ts, cm, cs = cache
        gMi, gRm, gtm = latent_map_backward(feats.M, tm, gM)
        gSi, gRs, gts = latent_map_backward(feats.S, ts, gS)
        self.motion.backward(cm, gRm, gtm)
        self.semantic.backward(cs, gRs, gts)
        return gMi, gSi


# --------------------------------------------------------------------------
# graph-based association


def pairwise_abs_diff(pV, pI) -> np.ndarray:
    pV = np.asarray(pV, dtype=np.float64).reshape(-1, 3)
    pI = np.asarray(pI, dtype=np.float64).reshape(-1, 3)
    return np.abs(pV[:, None, :] - pI[None, :, :])


def node_features(mlp: MLP, feats: InstanceFeatures):
    return mlp.forward(np.concatenate([feats.M, feats.S], axis=1))


def edge_features(mlp: MLP, pV, pI):
    return mlp.forward(pairwise_abs_diff(pV, pI) * EDGE_SCALE)


def attention_logits(nV, nI, E, WV, WI, WE) -> np.ndarray:
    """Per-pair attention vector: (N^V W^V)(N^I W^I)^T / sqrt(d) + E W^E.

    The scalar dot-product term is broadcast over the d channels of the
    projected edge embedding, giving an (N_V, N_I, d) tensor for the FFN.
    """
    d = WV.shape[1]
    s = (nV @ WV) @ (nI @ WI).T / math.sqrt(d)
    return s[:, :, None] + E @ WE


@dataclass
class AffinityMatrix:
    A: np.ndarray
    logits: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.A.size and (self.A.min() < 0 or self.A.max() > 1):
            raise ValueError("affinities must lie in [0, 1]")

    @property
    def shape(self):
        return self.A.shape


class GraphAssociation:
    def __init__(self, store: ParamStore, name: str, d: int, rng, hidden: int = None):
        hidden = hidden or d
        self.store, self.d = store, d
        self.node = MLP(store, name + ".node", [2 * d, d, d], rng)
        self.edge = MLP(store, name + ".edge", [3, d, d], rng)
        s = 1.0 / math.sqrt(d)
        self.WV = store.add(name + ".WV", rng.normal(0, s, (d, d)))
        self.WI = store.add(name + ".WI", rng.normal(0, s, (d, d)))
        self.WE = store.add(name + ".WE", rng.normal(0, s, (d, d)))
        self.ffn = MLP(store, name + ".ffn", [d, hidden, 1], rng)

    def forward(self, fV: InstanceFeatures, fI: InstanceFeatures, pV, pI):
        P = self.store.params
        nV, cnv = node_features(self.node, fV)
        nI, cni = node_features(self.node, fI)
        E, ce = edge_features(self.edge, pV, pI)
        X = attention_logits(nV, nI, E, P[self.WV], P[self.WI], P[self.WE])
        z, cf = self.ffn.forward(X)
        logits = z[..., 0]
        diff = np.asarray(pV, dtype=np.float64).reshape(-1, 1, 3) - np.asarray(pI, dtype=np.float64).reshape(1, -1, 3)
        return AffinityMatrix(sigmoid(logits), logits), (nV, nI, E, cnv, cni, ce, cf, diff)

    def backward(self, cache, glogits, positions: bool = False):
        """Gradient w.r.t. the logits; returns (gMV, gSV, gMI, gSI), plus (gpV, gpI) with ``positions``."""
        nV, nI, E, cnv, cni, ce, cf, diff = cache
        P, G = self.store.params, self.store.grads
        WV, WI, WE = P[self.WV], P[self.WI], P[self.WE]
        gX = self.ffn.backward(cf, glogits[..., None])
        gs = gX.sum(axis=-1) / math.sqrt(self.d)
        PV, PI = nV @ WV, nI @ WI
        gPV, gPI = gs @ PI, gs.T @ PV
        G[self.WV] += nV.T @ gPV
        G[self.WI] += nI.T @ gPI
        Ef = E.reshape(-1, self.d)
        G[self.WE] += Ef.T @ gX.reshape(-1, self.d)
        gE = gX @ WE.T
        gD = self.edge.backward(ce, gE) * EDGE_SCALE * np.sign(diff)
        gnV = self.node.backward(cnv, gPV @ WV.T)
        gnI = self.node.backward(cni, gPI @ WI.T)
        d = self.d
        out = (gnV[:, :d], gnV[:, d:], gnI[:, :d], gnI[:, d:])
        if positions:
            out += (gD.sum(axis=1), -gD.sum(axis=0))
        return out


def gba_affinity(gba: GraphAssociation, fV, fI, pV, pI) -> AffinityMatrix:
    return gba.forward(fV, fI, pV, pI)[0]


# --------------------------------------------------------------------------
# matching and aggregation


@dataclass
class MatchSet:
    pairs: list  # (vehicle index, infra index, affinity)
    unmatched_vehicle: list
    unmatched_infra: list


def match(A, threshold: float = 0.5) -> MatchSet:
    """Hungarian on 1 - A, discarding pairs below ``threshold``."""
    A = np.asarray(A.A if isinstance(A, AffinityMatrix) else A, dtype=np.float64)
    nv, ni = A.shape if A.ndim == 2 else (0, 0)
    pairs = []
    if nv and ni:
        for r, c in hungarian(1.0 - A).pairs:
            if A[r, c] >= threshold:
                pairs.append((int(r), int(c), float(A[r, c])))
    mv = {p[0] for p in pairs}
    mi = {p[1] for p in pairs}
    return MatchSet(pairs, [i for i in range(nv) if i not in mv], [j for j in range(ni) if j not in mi])


TAG_VEHICLE, TAG_INFRA, TAG_FUSED = "vehicle", "infra", "fused"


@dataclass
class AggregateOutput:
    features: InstanceFeatures
    refs: np.ndarray
    tags: list
    vehicle_index: np.ndarray  # -1 for infra-only rows
    infra_index: np.ndarray  # -1 for vehicle-only rows

    def __len__(self):
        return len(self.tags)


class Aggregator:
    """Gated convex fusion of matched pairs: g * f_V + (1 - g) * f_I."""

    def __init__(self, store: ParamStore, name: str, d: int, rng):
        self.gate_m = MLP(store, name + ".gate_m", [2 * d, d, d], rng, last_gain=0.1)
        self.gate_s = MLP(store, name + ".gate_s", [2 * d, d, d], rng, last_gain=0.1)

    def forward(self, matches: MatchSet, fV: InstanceFeatures, fI: InstanceFeatures, pV, pI,
                force_gate: float = None):
        nv = len(fV)
        vi = np.array([p[0] for p in matches.pairs], dtype=int)
        ii = np.array([p[1] for p in matches.pairs], dtype=int)
        um = np.array(matches.unmatched_infra, dtype=int)
        M = np.concatenate([fV.M, fI.M[um]], axis=0)
        S = np.concatenate([fV.S, fI.S[um]], axis=0)
        refs = np.concatenate([np.asarray(pV).reshape(-1, 3), np.asarray(pI).reshape(-1, 3)[um]], axis=0)
        tags = [TAG_VEHICLE] * nv + [TAG_INFRA] * len(um)
        caches = None
        if len(vi):
            outs = []
            caches = []
            for mlp, FV, FI, dst in ((self.gate_m, fV.M, fI.M, M), (self.gate_s, fV.S, fI.S, S)):
                a, b = FV[vi], FI[ii]
                z, c = mlp.forward(np.concatenate([a, b], axis=1))
                g = sigmoid(z) if force_gate is None else np.full_like(z, force_gate)
                dst[vi] = g * a + (1 - g) * b
                caches.append((c, g, a, b))
            for r in vi:
                tags[r] = TAG_FUSED
        v_index = np.concatenate([np.arange(nv), -np.ones(len(um), dtype=int)])
        i_index = -np.ones(nv + len(um), dtype=int)
        i_index[vi] = ii
        i_index[nv:] = um
        out = AggregateOutput(InstanceFeatures(M, S), refs, tags, v_index, i_index)
        return out, (vi, ii, um, nv, len(fI), caches, force_gate is not None)

    def backward(self, cache, gM, gS):
        """Returns (gMV, gSV, gMI, gSI)."""
        vi, ii, um, nv, ni, caches, forced = cache
        d = gM.shape[1]
        gMV, gSV = gM[:nv].copy(), gS[:nv].copy()
        gMI, gSI = np.zeros((ni, d)), np.zeros((ni, d))
        gMI[um] += gM[nv:]
        gSI[um] += gS[nv:]
        if caches is not None:
            for mlp, (c, g, a, b), gout, gV, gI in ((self.gate_m, caches[0], gM, gMV, gMI),
                                                     (self.gate_s, caches[1], gS, gSV, gSI)):
                go = gout[vi]
                gV[vi] = go * g
                np.add.at(gI, ii, go * (1 - g))
                if not forced:
                    gz = go * (a - b) * g * (1 - g)
                    gin = mlp.backward(c, gz)
                    gV[vi] += gin[:, :d]
                    np.add.at(gI, ii, gin[:, d:])
        return gMV, gSV, gMI, gSI


def aggregate(aggregator: Aggregator, matches, fV, fI, pV, pI):
    out, _ = aggregator.forward(matches, fV, fI, pV, pI)
    return out.features, out.refs, out.tags


# --------------------------------------------------------------------------
# V2X wire format

MESSAGE_HEADER = struct.Struct("<I")


@dataclass
class V2XMessage:
    M: np.ndarray
    S: np.ndarray
    refs: np.ndarray  # infrastructure frame
    scores: np.ndarray
    labels: np.ndarray
    frame: int = 0

    def __len__(self):
        return len(self.refs)

    @classmethod
    def empty(cls, d: int, frame: int = 0) -> "V2XMessage":
        return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, int), frame)


def instance_bytes(d: int) -> int:
    """Per-instance payload: M and S rows, reference point, score (float32) and class (uint8)."""
    return 2 * d * 4 + 3 * 4 + 4 + 1


def message_bytes(n: int, d: int) -> int:
    return MESSAGE_HEADER.size + n * instance_bytes(d)


def encode_message(msg: V2XMessage) -> bytes:
    n = len(msg)
    parts = [MESSAGE_HEADER.pack(n)]
    for i in range(n):
        parts.append(np.concatenate([msg.M[i], msg.S[i], msg.refs[i], [msg.scores[i]]]).astype("<f4").tobytes())
        parts.append(struct.pack("<B", int(msg.labels[i])))
    return b"".join(parts)


def decode_message(buf: bytes, d: int) -> V2XMessage:
    (n,) = MESSAGE_HEADER.unpack_from(buf, 0)
    size = instance_bytes(d)
    if len(buf) != MESSAGE_HEADER.size + n * size:
        raise ValueError(f"message length {len(buf)} does not match {n} instances of d={d}")
    M, S, refs, scores, labels = [], [], [], [], []
    off = MESSAGE_HEADER.size
    for _ in range(n):
        v = np.frombuffer(buf, dtype="<f4", count=2 * d + 4, offset=off).astype(np.float64)
        off += (2 * d + 4) * 4
        (lab,) = struct.unpack_from("<B", buf, off)
        off += 1
        M.append(v[:d])
        S.append(v[d:2 * d])
        refs.append(v[2 * d:2 * d + 3])
        scores.append(v[2 * d + 3])
        labels.append(lab)
    if n == 0:
        return V2XMessage.empty(d)
    return V2XMessage(np.array(M), np.array(S), np.array(refs), np.array(scores), np.array(labels))


BOX_RECORD_BYTES = 9 * 4 + 4 + 1


def box_message_bytes(n: int) -> int:
    """Late-fusion message: header plus nine box floats, score and class per box."""
    return MESSAGE_HEADER.size + n * BOX_RECORD_BYTES


def dense_grid_bytes(d: int, grid: int = 200) -> int:
    return grid * grid * d * 4
