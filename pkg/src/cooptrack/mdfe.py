"""Multi-dimensional feature extraction.

Per instance, a semantic feature comes from the decoder's query feature and
a motion feature from the coarse box geometry (PointNet over the eight
centre-relative corners). Both are then refined by a temporal transformer
that attends over the instance's own FIFO history.
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import BOX_DIM, H, L, THETA, VX, VY, W
from .numerics import MLP, LayerNorm, MultiHeadAttention, ParamStore, sinusoidal_pe
from .scene import DecoderEmulator, DecoderOutput, Detections

# corner sign pattern (x, y, z) shared by every box
CORNER_SIGNS = np.array(list(itertools.product((1.0, -1.0), repeat=3)))
# velocity is appended to each corner point at this scale
VEL_SCALE = 0.25


@dataclass
class QuerySet:
    features: np.ndarray  # (N, d)
    refs: np.ndarray  # (N, 3) agent frame
    is_track: np.ndarray  # (N,) bool
    track_ids: np.ndarray  # (N,) -1 for fresh slots
    boxes: np.ndarray  # (N, 9) last decoded box of track slots
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        n = len(self.features)
        for name in ("refs", "is_track", "track_ids", "boxes", "labels"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"QuerySet.{name} has {len(getattr(self, name))} rows, expected {n}")
        if np.any(self.track_ids[~self.is_track] != -1):
            raise ValueError("fresh slots cannot carry a track id")

    def __len__(self):
        return len(self.features)


@dataclass
class InstanceFeatures:
    M: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        if self.M.shape[0] != self.S.shape[0]:
            raise ValueError("motion and semantic features must have the same row count")

    def __len__(self):
        return self.M.shape[0]


class HistoryBuffer:
    """Per-track FIFO of past (motion, semantic) feature rows."""

    def __init__(self, capacity: int, d: int):
        self.capacity = capacity
        self.d = d
        self.entries: dict[int, deque] = {}

    def copy(self) -> "HistoryBuffer":
        out = HistoryBuffer(self.capacity, self.d)
        out.entries = {k: deque(v, maxlen=self.capacity) for k, v in self.entries.items()}
        return out

    def valid_count(self, track_id: int) -> int:
        return len(self.entries.get(track_id, ()))

    def gather(self, ids):
        """(Hm, Hs, mask) with slot 0 the most recent frame; unknown ids are fully masked."""
        n, tau, d = len(ids), self.capacity, self.d
        Hm = np.zeros((n, tau, d))
        Hs = np.zeros((n, tau, d))
        mask = np.zeros((n, tau), dtype=bool)
        for r, i in enumerate(ids):
            q = self.entries.get(int(i))
            if not q:
                continue
            for a, (m, s) in enumerate(reversed(q)):
                Hm[r, a], Hs[r, a] = m, s
                mask[r, a] = True
        return Hm, Hs, mask


def history_update(buffer: HistoryBuffer, M, S, active_ids) -> HistoryBuffer:
    """Append the newest rows per id, evict beyond capacity, drop inactive ids."""
    out = HistoryBuffer(buffer.capacity, buffer.d)
    if buffer.capacity == 0:
        return out
    for r, i in enumerate(active_ids):
        i = int(i)
        q = deque(buffer.entries.get(i, ()), maxlen=buffer.capacity)
        q.append((np.array(M[r], dtype=np.float64), np.array(S[r], dtype=np.float64)))
        out.entries[i] = q
    return out


def corners_from_boxes(boxes) -> np.ndarray:
    """(N, 8, 3) centre-relative corners rotated by yaw."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    if np.any(boxes[:, [W, L, H]] <= 0):
        raise ValueError("box dimensions must be positive")
    half = np.stack([boxes[:, L], boxes[:, W], boxes[:, H]], axis=1) / 2
    local = CORNER_SIGNS[None] * half[:, None, :]
    c, s = np.cos(boxes[:, THETA])[:, None], np.sin(boxes[:, THETA])[:, None]
    x = local[..., 0] * c - local[..., 1] * s
    y = local[..., 0] * s + local[..., 1] * c
    return np.stack([x, y, local[..., 2]], axis=-1)


def corners_from_box(box) -> np.ndarray:
    return corners_from_boxes(np.asarray(box).reshape(1, BOX_DIM))[0]


def corner_points(boxes) -> np.ndarray:
    """Motion-head input: corners plus the scaled coarse velocity on every point."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    c = corners_from_boxes(boxes)
    v = np.broadcast_to((boxes[:, None, VX:VY + 1] * VEL_SCALE), c.shape[:2] + (2,))
    return np.concatenate([c, v], axis=-1)


def motion_head(mlp: MLP, points):
    """Shared MLP per point, then max over the point axis. points: (N, P, k)."""
    h, cache = mlp.forward(points)
    if h.shape[0] == 0:
        return np.zeros((0, h.shape[-1])), (cache, None, h.shape)
    arg = np.argmax(h, axis=1)
    M = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0]
    return M, (cache, arg, h.shape)


def motion_head_backward(mlp: MLP, cache, gM):
    c, arg, shape = cache
    gh = np.zeros(shape)
    if arg is not None:
        np.put_along_axis(gh, arg[:, None, :], gM[:, None, :], axis=1)
    return mlp.backward(c, gh)


class SemanticHead:
    """Two-layer residual MLP: S = Q + MLP(Q)."""

    def __init__(self, store, name, d, rng, zero_init=False):
        self.mlp = MLP(store, name, [d, d, d], rng, last_gain=0.5,
                       last_init="zeros" if zero_init else "he")

    def forward(self, Q):
        y, c = self.mlp.forward(Q)
        return Q + y, c

    def backward(self, cache, gS):
        return gS + self.mlp.backward(cache, gS)


class TemporalBlock:
    """Post-norm decoder layers of (instance self-attention, history cross-attention, FFN)."""

    def __init__(self, store: ParamStore, name: str, d: int, tau: int, rng,
                 n_heads: int = 4, ff_mult: int = 4, n_layers: int = 2):
        self.d, self.tau = d, tau
        self.layers = []
        for i in range(n_layers):
            p = f"{name}.{i}"
            self.layers.append((
                MultiHeadAttention(store, p + ".self", d, n_heads, rng),
                MultiHeadAttention(store, p + ".cross", d, n_heads, rng),
                MLP(store, p + ".ffn", [d, ff_mult * d, d], rng, last_gain=0.5),
                (LayerNorm(store, p + ".ln1", d), LayerNorm(store, p + ".ln2", d), LayerNorm(store, p + ".ln3", d)),
            ))
        self.pe = np.stack([sinusoidal_pe(a, d) for a in range(1, tau + 1)]) if tau else np.zeros((0, d))

    def forward(self, x, hist, mask):
        n = x.shape[0]
        caches = []
        if n == 0:
            return x.copy(), caches
        kv = hist + self.pe[None, :hist.shape[1]]
        has_hist = mask.any(axis=1) if mask.shape[1] else np.zeros(n, dtype=bool)
        any_hist = bool(has_hist.any())
        for sa, ca, ffn, (ln1, ln2, ln3) in self.layers:
            a, c1 = sa.forward(x[None], x[None], np.ones((1, n, n), dtype=bool))
            x, n1 = ln1.forward(x + a[0])
            c2 = None
            if any_hist:
                b, c2 = ca.forward(x[:, None, :], kv, mask[:, None, :])
                x = x + b[:, 0] * has_hist[:, None]
            x, n2 = ln2.forward(x)
            f, c3 = ffn.forward(x)
            x, n3 = ln3.forward(x + f)
            caches.append((c1, c2, c3, n1, n2, n3))
        caches.append(has_hist)
        return x, caches

    def backward(self, caches, gy):
        """Gradient w.r.t. the current features; history is detached."""
        if not caches:
            return gy
        has_hist = caches[-1]
        g = gy
        for (sa, ca, ffn, (ln1, ln2, ln3)), (c1, c2, c3, n1, n2, n3) in zip(reversed(self.layers),
                                                                         reversed(caches[:-1])):
            g = ln3.backward(n3, g)
            g = g + ffn.backward(c3, g)
            g = ln2.backward(n2, g)
            if c2 is not None:
                gq, _ = ca.backward(c2, (g * has_hist[:, None])[:, None, :])
                g = g + gq[:, 0]
            g = ln1.backward(n1, g)
            gq, gkv = sa.backward(c1, g[None])
            g = g + gq[0] + gkv[0]
        return g


@dataclass
class MDFEOutput:
    decoder: DecoderOutput
    features: InstanceFeatures

    def __len__(self):
        return len(self.features)


class MDFE:
    """One agent's feature extractor; vehicle and infrastructure each own one."""

    def __init__(self, store: ParamStore, prefix: str, d: int, tau: int, rng,
                 n_heads: int = 4, ff_mult: int = 4, gate: float = 4.0):
        self.store, self.prefix, self.d, self.tau = store, prefix, d, tau
        self.decoder = DecoderEmulator(store, prefix + ".dec", d, rng, gate=gate)
        self.fresh_name = store.add(prefix + ".fresh_query", rng.normal(0.0, 0.5, size=d))
        self.semantic = SemanticHead(store, prefix + ".sem", d, rng)
        self.motion = MLP(store, prefix + ".mot", [5, d, d, d, d], rng)
        self.temporal_m = TemporalBlock(store, prefix + ".tmp_m", d, tau, rng, n_heads, ff_mult)
        self.temporal_s = TemporalBlock(store, prefix + ".tmp_s", d, tau, rng, n_heads, ff_mult)

    @property
    def fresh_query(self) -> np.ndarray:
        return self.store.params[self.fresh_name]

    def new_history(self) -> HistoryBuffer:
        return HistoryBuffer(self.tau, self.d)

    def forward(self, dets: Detections, queries: QuerySet, history: HistoryBuffer):
        dec, cdec = self.decoder.forward(dets, queries)
        S0, csem = self.semantic.forward(dec.features)
        M0, cmot = motion_head(self.motion, corner_points(dec.boxes))
        Hm, Hs, mask = history.gather(dec.track_ids)
        M, ctm = self.temporal_m.forward(M0, Hm, mask)
        S, cts = self.temporal_s.forward(S0, Hs, mask)
        out = MDFEOutput(dec, InstanceFeatures(M, S))
        return out, (cdec, csem, cmot, ctm, cts, dec.is_track)

    def backward(self, cache, gM, gS):
        cdec, csem, cmot, ctm, cts, is_track = cache
        if len(is_track) == 0:
            return
        gM0 = self.temporal_m.backward(ctm, gM)
        gS0 = self.temporal_s.backward(cts, gS)
        motion_head_backward(self.motion, cmot, gM0)
        gfeat = self.semantic.backward(csem, gS0)
        gq, _ = self.decoder.backward(cdec, gfeat)
        fresh = ~is_track
        if fresh.any():
            self.store.grads[self.fresh_name] += gq[fresh].sum(axis=0)


def mdfe_forward(model: MDFE, dets: Detections, queries: QuerySet, history: HistoryBuffer):
    """Run extraction and return (features, coarse boxes, history with this frame pushed).

    The history push keys rows by track id; fresh rows have no id yet and are
    pushed by the tracker once ids are assigned.
    """
    out, _ = model.forward(dets, queries, history)
    if len(out) == 0:
        return out.features, out.decoder.boxes, history
    ids = out.decoder.track_ids
    keep = ids >= 0
    new_hist = history_update(history, out.features.M[keep], out.features.S[keep], ids[keep])
    return out.features, out.decoder.boxes, new_hist
