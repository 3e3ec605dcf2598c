import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cooptrack.fusion import (
    Aggregator, CrossAgentAlignment, GraphAssociation, LatentTransform, LatentTransformHead, MatchSet,
    V2XMessage, aggregate, attention_logits, box_message_bytes, caa_align, decode_message,
    dense_grid_bytes, edge_features, encode_message, encode_pose, gba_affinity, instance_bytes, match,
    message_bytes, node_features, pairwise_abs_diff, predict_latent_transform, spatial_transform,
)
from cooptrack.geometry import Pose, axis_angle_matrix
from cooptrack.mdfe import InstanceFeatures
from cooptrack.numerics import ConfigurationError, ParamStore, adamw_step, cosine_lr
from cooptrack.scene import embedder, sample_domain_operator

D = 8


def feats(n, seed=0, d=D):
    rng = np.random.default_rng(seed)
    return InstanceFeatures(rng.normal(size=(n, d)), rng.normal(size=(n, d)))


def test_encode_pose_examples():
    assert np.array_equal(encode_pose(Pose.identity()), [1, 0, 0, 0, 1, 0, 0, 0, 0])
    assert np.array_equal(encode_pose(Pose(np.eye(3), np.array([1.0, 2, 3]))), [1, 0, 0, 0, 1, 0, 1, 2, 3])


def test_encode_pose_is_continuous():
    axis = np.array([0.3, -0.5, 0.8])
    base = encode_pose(Pose(axis_angle_matrix(axis, 0.4), np.zeros(3)))
    for delta in (1e-1, 1e-2, 1e-3, 1e-4):
        moved = encode_pose(Pose(axis_angle_matrix(axis, 0.4 + delta), np.zeros(3)))
        assert np.linalg.norm(moved - base) <= 2 * delta


def test_latent_transform_head_contract():
    store = ParamStore()
    head = LatentTransformHead(store, "h", 32, 8, np.random.default_rng(0))
    tf = predict_latent_transform(encode_pose(Pose.from_xy_yaw(3, 4, 0.5)), head)
    assert np.array_equal(tf.R, np.eye(32)) and np.array_equal(tf.t, np.zeros(32))
    assert head.rotation_outputs == 32 * 8 < 32 ** 2
    full = LatentTransformHead(ParamStore(), "f", 8, 8, np.random.default_rng(0))
    assert full.rotation_outputs == 64
    with pytest.raises(ConfigurationError):
        LatentTransformHead(ParamStore(), "x", 10, 8, np.random.default_rng(0))


def test_latent_transform_block_structure():
    store = ParamStore()
    head = LatentTransformHead(store, "h", 16, 4, np.random.default_rng(0))
    for n in store.names():
        store.params[n] += np.random.default_rng(1).normal(size=store.params[n].shape)
    tf = predict_latent_transform(encode_pose(Pose.from_xy_yaw(1, 2, 0.3)), head)
    mask = np.kron(np.eye(4), np.ones((4, 4))).astype(bool)
    assert np.all(tf.R[~mask] == 0) and np.any(tf.R[mask] != np.eye(16)[mask])


def test_caa_examples():
    f = feats(3)
    same = caa_align(f, LatentTransform.identity(D))
    assert np.array_equal(same.M, f.M) and np.array_equal(same.S, f.S)
    R = np.eye(D)
    R[:2, :2] = [[0, -1], [1, 0]]
    x = np.zeros((1, D))
    x[0, 0] = 1.0
    out = caa_align(InstanceFeatures(x, x), LatentTransform(R, np.zeros(D), 2))
    expect = np.zeros(D)
    expect[1] = 1.0
    assert np.allclose(out.M[0], expect)


def test_spatial_transform_examples():
    p = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(spatial_transform(p, Pose.identity()), p)
    assert np.allclose(spatial_transform([0, 0, 0], Pose(np.eye(3), np.array([1.0, 0, 0]))), [[1, 0, 0]])
    pose = Pose(axis_angle_matrix([1, 2, 3], 0.7), np.array([4.0, -1, 2]))
    back = spatial_transform(spatial_transform(p, pose), pose.inverse())
    assert np.max(np.abs(back - p)) < 1e-9


def test_node_and_edge_features():
    gba = GraphAssociation(ParamStore(), "g", D, np.random.default_rng(0))
    f = feats(2)
    f.M[1], f.S[1] = f.M[0], f.S[0]
    n, _ = node_features(gba.node, f)
    assert np.array_equal(n[0], n[1])
    assert node_features(gba.node, feats(0))[0].shape == (0, D)
    assert np.array_equal(pairwise_abs_diff([1, 2, 0], [4, 0, 0])[0, 0], [3, 2, 0])
    a = np.random.default_rng(1).normal(size=(3, 3))
    b = np.random.default_rng(2).normal(size=(2, 3))
    assert np.array_equal(pairwise_abs_diff(a, b), pairwise_abs_diff(b, a).transpose(1, 0, 2))
    E, _ = edge_features(gba.edge, np.zeros((2, 3)), np.zeros((3, 3)))
    assert np.all(E == E[0, 0])


def test_attention_logit_scalar_case():
    one = np.ones((1, 1))
    X = attention_logits(np.array([[2.0]]), np.array([[3.0]]), np.ones((1, 1, 1)), one, one, one)
    assert X[0, 0, 0] == 7.0


def test_zero_weights_give_half_affinity():
    store = ParamStore()
    gba = GraphAssociation(store, "g", D, np.random.default_rng(0))
    for n in store.names():
        store.params[n][...] = 0.0
    A = gba_affinity(gba, feats(3), feats(4, 1), np.zeros((3, 3)), np.ones((4, 3)))
    assert np.all(A.A == 0.5)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_affinity_permutation_equivariant_and_bounded(seed):
    rng = np.random.default_rng(seed)
    gba = GraphAssociation(ParamStore(), "g", D, np.random.default_rng(0))
    fV, fI = feats(3, seed), feats(4, seed + 1)
    pV, pI = rng.normal(0, 5, (3, 3)), rng.normal(0, 5, (4, 3))
    A = gba_affinity(gba, fV, fI, pV, pI).A
    assert np.all((A >= 0) & (A <= 1))
    perm = rng.permutation(4)
    B = gba_affinity(gba, fV, InstanceFeatures(fI.M[perm], fI.S[perm]), pV, pI[perm]).A
    assert np.allclose(B, A[:, perm], atol=1e-12)


def test_duplicated_input_gives_symmetric_affinity():
    gba = GraphAssociation(ParamStore(), "g", D, np.random.default_rng(0))
    caa = CrossAgentAlignment(ParamStore(), "c", D, 4, np.random.default_rng(1))
    f = feats(4)
    p = np.random.default_rng(2).normal(0, 5, (4, 3))
    aligned, _ = caa.forward(f, Pose.identity())
    gba.store.params[gba.WI][...] = gba.store.params[gba.WV]
    A = gba_affinity(gba, f, aligned, p, spatial_transform(p, Pose.identity())).A
    assert np.allclose(A, A.T, atol=1e-12)


def test_match_examples():
    m = match(np.array([[0.9]]), 0.5)
    assert [p[:2] for p in m.pairs] == [(0, 0)]
    m = match(np.array([[0.2]]), 0.5)
    assert m.pairs == [] and m.unmatched_vehicle == [0] and m.unmatched_infra == [0]
    m = match(np.zeros((0, 3)), 0.5)
    assert m.unmatched_infra == [0, 1, 2]


@pytest.mark.parametrize("seed", range(30))
def test_match_brute_force_and_partition(seed):
    A = np.random.default_rng(seed).random((5, 5))
    best = max(itertools.permutations(range(5)), key=lambda p: sum(A[r, c] for r, c in enumerate(p)))
    expect = {(r, c) for r, c in enumerate(best) if A[r, c] >= 0.5}
    m = match(A, 0.5)
    assert {p[:2] for p in m.pairs} == expect
    assert sorted([p[0] for p in m.pairs] + m.unmatched_vehicle) == list(range(5))
    assert sorted([p[1] for p in m.pairs] + m.unmatched_infra) == list(range(5))


def test_aggregate_examples():
    agg = Aggregator(ParamStore(), "a", D, np.random.default_rng(0))
    fV, fI = feats(3), feats(2, 1)
    pV, pI = np.zeros((3, 3)), np.ones((2, 3))
    f, refs, tags = aggregate(agg, MatchSet([], [0, 1, 2], [0, 1]), fV, fI, pV, pI)
    assert len(f) == 5 and tags == ["vehicle"] * 3 + ["infra"] * 2
    assert np.array_equal(refs[3:], pI)
    ms = MatchSet([(1, 0, 0.9)], [0, 2], [1])
    out, _ = agg.forward(ms, fV, fI, pV, pI, force_gate=1.0)
    assert len(out) == 3 + 2 - 1
    assert np.array_equal(out.features.M[1], fV.M[1]) and out.tags[1] == "fused"
    out, _ = agg.forward(ms, fV, fI, pV, pI)
    g_lo = np.minimum(fV.M[1], fI.M[0]) - 1e-12
    g_hi = np.maximum(fV.M[1], fI.M[0]) + 1e-12
    assert np.all((out.features.M[1] >= g_lo) & (out.features.M[1] <= g_hi))
    full = MatchSet([(0, 1, 0.8), (1, 0, 0.8)], [], [])
    out, _ = agg.forward(full, feats(2), fI, np.zeros((2, 3)), pI)
    assert len(out) == 2


def test_wire_format_round_trip():
    rng = np.random.default_rng(0)
    n, d = 3, 32
    msg = V2XMessage(rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=(n, 3)),
                     rng.random(n), np.array([0, 2, 1]))
    buf = encode_message(msg)
    assert len(buf) == message_bytes(n, d) == 4 + n * 273
    assert instance_bytes(d) == 273
    back = decode_message(buf, d)
    assert np.allclose(back.M, msg.M, atol=1e-6) and np.array_equal(back.labels, msg.labels)
    assert len(decode_message(encode_message(V2XMessage.empty(d)), d)) == 0
    with pytest.raises(ValueError):
        decode_message(buf[:-1], d)


def test_message_size_ordering():
    assert 0 < box_message_bytes(10) < message_bytes(10, 32) < dense_grid_bytes(32)
    assert dense_grid_bytes(32) >= 100 * message_bytes(10, 32)


def test_caa_recovers_synthetic_domain_gap():
    """Fit CAA on same-object latent pairs seen through two domain operators."""
    d, k = 16, 8
    rng = np.random.default_rng(0)
    DV, eV = sample_domain_operator(d, k, np.random.default_rng([1, 0]))
    DI, eI = sample_domain_operator(d, k, np.random.default_rng([1, 1]))
    emb = embedder(d)
    n = 64
    labels = rng.integers(0, 3, n)
    dims = np.exp(rng.normal(0, 0.2, (n, 3))) * [1.9, 4.5, 1.6]
    z = emb(labels, dims, rng.uniform(-math.pi, math.pi, n))
    xV, xI = z @ DV.T + eV, z @ DI.T + eI
    store = ParamStore()
    caa = CrossAgentAlignment(store, "c", d, k, np.random.default_rng(2))
    pose = Pose.from_xy_yaw(5.0, -3.0, 0.4)
    f = InstanceFeatures(xI, xI)
    before = np.linalg.norm(xI - xV)
    steps = 600
    for s in range(steps):
        store.zero_grad()
        out, cache = caa.forward(f, pose)
        caa.backward(cache, 2 * (out.M - xV) / n, 2 * (out.S - xV) / n)
        adamw_step(store, cosine_lr(s, steps, 3e-3), weight_decay=0.0)
    out, _ = caa.forward(f, pose)
    assert np.linalg.norm(out.M - xV) < 0.1 * before
    assert np.linalg.norm(out.S - xV) < 0.1 * before
