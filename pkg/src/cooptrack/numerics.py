"""Dense numerics with hand-written backward passes.

Every learnable block exposes ``forward(...) -> (out, cache)`` and
``backward(cache, grad_out) -> grad_in``; parameter gradients are accumulated
into the owning :class:`ParamStore`. All arithmetic is float64.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_EPS = 1e-7
CHECKPOINT_MAGIC = b"CTCK"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Named parameters with gradient slots and AdamW moments."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> str:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return name

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self, prefix: str = "") -> int:
        return sum(self.params[n].size for n in self.names(prefix))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        for name, value in state.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            if self.params[name].shape != value.shape:
                raise DimensionError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name][...] = value
        if strict:
            missing = set(self.params) - set(state)
            if missing:
                raise KeyError(f"missing parameters {sorted(missing)}")

    def save(self, path, include_optimizer: bool = True):
        records = [(n, p) for n, p in self.params.items()]
        if include_optimizer:
            records += [(f"adam.m/{n}", a) for n, a in self.m.items()]
            records += [(f"adam.v/{n}", a) for n, a in self.v.items()]
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQI", CHECKPOINT_VERSION, self.step, len(records)))
            for name, arr in records:
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def load(self, path, strict: bool = True):
        """Load a checkpoint written by :meth:`save` into this store in place."""
        params, moments, step = read_checkpoint(path)
        self.load_state_dict(params, strict=strict)
        for name, (m, v) in moments.items():
            if name in self.params:
                self.m[name][...] = m
                self.v[name][...] = v
        self.step = step


def read_checkpoint(path):
    """Parse a checkpoint file into (params, moments, step)."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, step, count = struct.unpack_from("<IQI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IQI")
    params, ms, vs = {}, {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        if name.startswith("adam.m/"):
            ms[name[7:]] = arr
        elif name.startswith("adam.v/"):
            vs[name[7:]] = arr
        else:
            params[name] = arr
    moments = {k: (ms[k], vs[k]) for k in ms if k in vs}
    return params, moments, step


# --------------------------------------------------------------------------
# linear layers


def linear_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y = x W^T + b over the last axis of ``x``."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or np.shape(b) != (W.shape[0],):
        raise DimensionError(f"linear: W{W.shape} b{np.shape(b)} x{x.shape}")
    return x @ W.T + b


def linear_backward(W, x, gy):
    """Return (gx, gW, gb) for y = x W^T + b."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = gy.reshape(-1, gy.shape[-1])
    return gy @ W, g2.T @ x2, g2.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, gain: float = 1.0, init: str = "he"):
        self.store = store
        self.d_in, self.d_out = d_in, d_out
        if init == "identity":
            W = np.eye(d_out, d_in)
        elif init == "zeros":
            W = np.zeros((d_out, d_in))
        else:
            std = gain * math.sqrt(2.0 / d_in) if init == "he" else gain * math.sqrt(1.0 / d_in)
            W = rng.normal(0.0, std, size=(d_out, d_in))
        self.wn = store.add(name + ".W", W)
        self.bn = store.add(name + ".b", np.zeros(d_out))

    @property
    def W(self):
        return self.store.params[self.wn]

    @property
    def b(self):
        return self.store.params[self.bn]

    def forward(self, x):
        return linear_forward(self.W, self.b, x), x

    def backward(self, x, gy):
        gx, gW, gb = linear_backward(self.W, x, gy)
        self.store.grads[self.wn] += gW
        self.store.grads[self.bn] += gb
        return gx


class MLP:
    """Stack of Linear layers with ReLU between them (not after the last)."""

    def __init__(self, store: ParamStore, name: str, dims: list[int],
                 rng: np.random.Generator, last_gain: float = 1.0, last_init: str = "he"):
        if len(dims) < 2:
            raise ConfigurationError("MLP needs at least one layer")
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(Linear(store, f"{name}.{i}", a, b, rng,
                                      gain=last_gain if last else 1.0,
                                      init=last_init if last else "he"))

    def forward(self, x):
        caches = []
        h = x
        for i, layer in enumerate(self.layers):
            h, c = layer.forward(h)
            pre = h
            if i < len(self.layers) - 1:
                h = relu(h)
            caches.append((c, pre))
        return h, caches

    def backward(self, caches, gy):
        g = gy
        for i in range(len(self.layers) - 1, -1, -1):
            c, pre = caches[i]
            if i < len(self.layers) - 1:
                g = g * (pre > 0)
            g = self.layers[i].backward(c, g)
        return g


def mlp_forward(layers, x, activation=relu):
    """Functional MLP over a list of (W, b) pairs; activation between layers only."""
    if not layers:
        raise ConfigurationError("empty layer list")
    h = np.asarray(x, dtype=np.float64)
    for i, (W, b) in enumerate(layers):
        h = linear_forward(W, b, h)
        if i < len(layers) - 1:
            h = activation(h)
    return h


# --------------------------------------------------------------------------
# attention


def masked_softmax(logits, mask):
    """Softmax over the last axis; masked-out entries get zero weight.

    Rows with no unmasked entry return all zeros.
    """
    z = np.where(mask, logits, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def scaled_dot_attention(Q, K, V, mask=None):
    """softmax(Q K^T / sqrt(d) + mask_bias) V, batched over leading axes.

    ``mask`` is boolean with True meaning "may attend". A row with no allowed
    key produces a zero output row.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: Q{Q.shape} K{K.shape} V{V.shape}")
    d = Q.shape[-1]
    if mask is None:
        mask = np.ones(Q.shape[:-1] + (K.shape[-2],), dtype=bool)
    if mask.shape[-2:] != (Q.shape[-2], K.shape[-2]):
        raise DimensionError(f"attention mask {mask.shape}")
    scale = 1.0 / math.sqrt(d)
    logits = (Q @ np.swapaxes(K, -1, -2)) * scale
    P = masked_softmax(logits, mask)
    return P @ V, (Q, K, V, P, scale)


def scaled_dot_attention_backward(cache, gout):
    Q, K, V, P, scale = cache
    gV = np.swapaxes(P, -1, -2) @ gout
    gP = gout @ np.swapaxes(V, -1, -2)
    gL = P * (gP - np.sum(gP * P, axis=-1, keepdims=True))
    gQ = (gL @ K) * scale
    gK = (np.swapaxes(gL, -1, -2) @ Q) * scale
    return gQ, gK, gV


LN_EPS = 1e-5


class LayerNorm:
    """Normalise over the last axis, then a learned gain and bias."""

    def __init__(self, store: ParamStore, name: str, d: int):
        self.store = store
        self.gn = store.add(name + ".g", np.ones(d))
        self.bn = store.add(name + ".b", np.zeros(d))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        sd = np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
        xh = (x - mu) / sd
        return xh * self.store.params[self.gn] + self.store.params[self.bn], (xh, sd)

    def backward(self, cache, gy):
        xh, sd = cache
        d = xh.shape[-1]
        self.store.grads[self.gn] += (gy * xh).reshape(-1, d).sum(axis=0)
        self.store.grads[self.bn] += gy.reshape(-1, d).sum(axis=0)
        gxh = gy * self.store.params[self.gn]
        return (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True)) / sd


class MultiHeadAttention:
    """Multi-head attention over batched sequences: xq (B,n,d), xkv (B,m,d)."""

    def __init__(self, store, name, d, n_heads, rng):
        if d % n_heads:
            raise ConfigurationError(f"d={d} not divisible by heads={n_heads}")
        self.h = n_heads
        self.q = Linear(store, name + ".q", d, d, rng, init="xavier")
        self.k = Linear(store, name + ".k", d, d, rng, init="xavier")
        self.v = Linear(store, name + ".v", d, d, rng, init="xavier")
        self.o = Linear(store, name + ".o", d, d, rng, init="xavier", gain=0.5)

    def _split(self, x):
        B, n, d = x.shape
        return x.reshape(B, n, self.h, d // self.h).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(x):
        B, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, n, h * dh)

    def forward(self, xq, xkv, mask):
        q, cq = self.q.forward(xq)
        k, ck = self.k.forward(xkv)
        v, cv = self.v.forward(xkv)
        att, ca = scaled_dot_attention(self._split(q), self._split(k), self._split(v),
                                       np.broadcast_to(mask[:, None], (mask.shape[0], self.h) + mask.shape[1:]))
        y, co = self.o.forward(self._merge(att))
        return y, (cq, ck, cv, ca, co)

    def backward(self, cache, gy):
        cq, ck, cv, ca, co = cache
        gatt = self._split(self.o.backward(co, gy))
        gq, gk, gv = scaled_dot_attention_backward(ca, gatt)
        gxq = self.q.backward(cq, self._merge(gq))
        gxkv = self.k.backward(ck, self._merge(gk)) + self.v.backward(cv, self._merge(gv))
        return gxq, gxkv


def sinusoidal_pe(position: int, d: int) -> np.ndarray:
    """Interleaved sin/cos encoding: pe[2i] = sin(p w_i), pe[2i+1] = cos(p w_i)."""
    if d % 2:
        raise ConfigurationError(f"positional encoding needs even d, got {d}")
    i = np.arange(d // 2)
    w = 1.0 / (10000.0 ** (2 * i / d))
    pe = np.empty(d)
    pe[0::2] = np.sin(position * w)
    pe[1::2] = np.cos(position * w)
    return pe


# --------------------------------------------------------------------------
# losses


def focal_loss(p, target, alpha: float, gamma: float):
    """Elementwise binary focal loss on probabilities (clamped to [eps, 1-eps])."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target, dtype=np.float64)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
    return t * pos + (1.0 - t) * neg


def sigmoid_focal_loss(logits, target, alpha: float, gamma: float):
    """Focal loss on logits via log-sigmoid (no clamping).

    Returns (elementwise loss, d loss / d logits).
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    p = sigmoid(z)
    q = sigmoid(-z)  # 1 - p without cancellation
    logp = -np.logaddexp(0.0, -z)
    logq = -np.logaddexp(0.0, z)
    qg, pg = q ** gamma, p ** gamma
    loss = t * (-alpha * qg * logp) + (1.0 - t) * (-(1.0 - alpha) * pg * logq)
    dpos = alpha * qg * (gamma * p * logp - q)
    dneg = (1.0 - alpha) * pg * (p - gamma * q * logq)
    return loss, t * dpos + (1.0 - t) * dneg


def l1_loss(pred, target):
    """Mean absolute difference."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.abs(pred - target)))


def l1_loss_grad(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    return np.sign(pred - np.asarray(target)) / max(pred.size, 1)


# --------------------------------------------------------------------------
# assignment


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def rows(self):
        return np.array([r for r, _ in self.pairs], dtype=int)

    @property
    def cols(self):
        return np.array([c for _, c in self.pairs], dtype=int)


def _hungarian_rows_le_cols(C):
    # potentials-based shortest augmenting path, O(n^2 m); 1-based with column 0 as sentinel
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment covering min(rows, cols) pairs."""
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got {C.shape}")
    if C.size == 0:
        return Assignment()
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    if C.shape[0] <= C.shape[1]:
        pairs = _hungarian_rows_le_cols(C)
    else:
        pairs = [(r, c) for c, r in _hungarian_rows_le_cols(C.T)]
    pairs.sort()
    return Assignment(pairs, float(sum(C[r, c] for r, c in pairs)))


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive minimum-cost assignment; for tests on small matrices."""
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    if n == 0 or m == 0:
        return Assignment()
    best, best_pairs = np.inf, []
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            c = C[np.arange(n), cols].sum()
            if c < best:
                best, best_pairs = c, list(zip(range(n), cols))
    else:
        for rows in itertools.permutations(range(n), m):
            c = C[rows, np.arange(m)].sum()
            if c < best:
                best, best_pairs = c, sorted(zip(rows, range(m)))
    return Assignment([(int(r), int(c)) for r, c in best_pairs], float(best))


# --------------------------------------------------------------------------
# rotation codec


def rot6d_encode(R) -> np.ndarray:
    """First two columns of R, concatenated."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise DimensionError(f"rotation must be 3x3, got {R.shape}")
    return np.concatenate([R[:, 0], R[:, 1]])


def rot6d_decode(v) -> np.ndarray:
    """Gram-Schmidt the two 3-vectors and complete with their cross product."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (6,):
        raise DimensionError(f"6D rotation code must have 6 entries, got {v.shape}")
    a1, a2 = v[:3], v[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise ValueError("degenerate 6D rotation code: zero first vector")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-9 * max(np.linalg.norm(a2), 1.0):
        raise ValueError("degenerate 6D rotation code: parallel vectors")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


# --------------------------------------------------------------------------
# optimisation


def adamw_step(store: ParamStore, lr: float, weight_decay: float = 0.01,
               betas=(0.9, 0.999), eps: float = 1e-8, names=None, max_grad_norm=None):
    """One decoupled-weight-decay Adam update; increments ``store.step``."""
    b1, b2 = betas
    store.step += 1
    t = store.step
    names = store.names() if names is None else names
    clip = 1.0
    if max_grad_norm is not None:
        total = math.sqrt(sum(float(np.sum(store.grads[n] ** 2)) for n in names))
        if total > max_grad_norm:
            clip = max_grad_norm / (total + 1e-12)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for n in names:
        p, g = store.params[n], store.grads[n] * clip
        p *= 1.0 - lr * weight_decay
        m, v = store.m[n], store.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    if total <= 0:
        raise ConfigurationError("cosine schedule needs total > 0")
    step = min(max(step, 0), total)
    return base_lr * (1.0 + math.cos(math.pi * step / total)) / 2.0


# --------------------------------------------------------------------------
# gradient checking


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5, idx=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    indices = range(flat.size) if idx is None else idx
    for i in indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
