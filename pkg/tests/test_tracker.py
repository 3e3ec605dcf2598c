import itertools
import math

import numpy as np
import pytest

from cooptrack.config import Config
from cooptrack.fusion import V2XMessage
from cooptrack.geometry import Pose
from cooptrack.mdfe import InstanceFeatures
from cooptrack.numerics import ParamStore, l1_loss, numeric_grad, rel_error
from cooptrack.scene import ObjectSpec, ScenarioSpec, default_infra, default_vehicle, generate_scenario
from cooptrack.tracker import (
    REG_DIM, CoopTrackModel, Instances, StepOptions, Track, TrackSet, compensate_latency, decode,
    decode_boxes, encode_box_targets, init_queries, late_fuse_boxes, propagate_boxes, run_scenario,
    select_and_propagate,
)

QUIET = dict(sigma_pos=0.0, sigma_dim=0.0, sigma_yaw=0.0, sigma_vel=0.0, miss_rate=0.0, clutter_rate=0.0,
             domain_gap=False)


def small_cfg(**kw):
    base = dict(d=16, tau=2, n_fresh=12, n_heads=2, block=8)
    base.update(kw)
    return Config(**base)


def rigged_model(cfg, associate=True):
    """Confident classifier and zero regression offsets.

    With ``associate`` the affinity is a hard distance test: about 1 for
    coincident reference points, below 0.5 once the L1 BEV gap exceeds 1 m.
    Otherwise every affinity is 0.5 - which still matches at threshold 0.5.
    """
    m = CoopTrackModel(cfg)
    P = m.store.params
    for agent in (m.vehicle, m.infra):
        last = agent.reg.layers[-1]
        P[last.wn][...] = 0.0
        P[last.bn][[0, 1, 2, 8, 9]] = 0.0
        cls = agent.cls.layers[-1]
        P[cls.wn][...] = 0.0
        P[cls.bn][:] = [3.0, -3.0, -3.0]
    g = m.gba
    for n in m.store.names("coop.gba."):
        P[n][...] = 0.0
    if associate:
        e0, e1 = g.edge.layers
        P[e0.wn][0, :2] = 1.0  # channel 0 = 0.1 * (|dx| + |dy|)
        P[e1.wn][0, 0] = 1.0
        P[g.WE][0, 0] = 1.0
        f0, f1 = g.ffn.layers
        P[f0.wn][0, 0] = -1.0
        P[f0.bn][0] = 0.2
        P[f1.wn][0, 0] = 100.0
        P[f1.bn][0] = -10.0
    return m


def hand_scene(objects, n_frames=5):
    return generate_scenario(ScenarioSpec(
        n_frames=n_frames, objects=objects, feature_dim=16, jitter=False, ego_start=(0.0, 0.0, 0.0),
        ego_speed=0.0, infra_pose=(20.0, -10.0, math.pi / 2),
        vehicle=default_vehicle(**QUIET), infra=default_infra(**QUIET)), 0)


def test_init_queries_slots():
    qs = init_queries(TrackSet(), 50, 0, np.zeros(4))
    assert len(qs) == 50 and not qs.is_track.any()
    ts = TrackSet([Track(i + 10, np.ones(4), np.zeros(3), 0.9, box=np.ones(9)) for i in range(3)], 13)
    qs = init_queries(ts, 50, 0, np.zeros(4))
    assert len(qs) == 53 and list(qs.track_ids[:3]) == [10, 11, 12] and qs.is_track[:3].all()
    assert Config().n_fresh == 50


def test_decode_contract():
    refs = np.array([[1.0, 2.0, 0.5]])
    raw = np.zeros((1, REG_DIM))
    raw[0, 7] = 1.0
    box = decode_boxes(raw, refs)[0]
    assert np.array_equal(box[:3], refs[0]) and np.array_equal(box[3:6], [1, 1, 1]) and box[6] == 0.0
    raw[0, 6:8] = [1.0, 0.0]
    assert decode_boxes(raw, refs)[0, 6] == pytest.approx(math.pi / 2)
    b = np.array([[3.0, 4.0, 1.0, 1.9, 4.5, 1.6, 0.7, 1.0, -2.0]])
    assert np.allclose(decode_boxes(encode_box_targets(b, refs), refs), b)


def test_decode_returns_boxes_and_probabilities():
    m = CoopTrackModel(small_cfg())
    f = InstanceFeatures(np.zeros((2, 16)), np.zeros((2, 16)))
    boxes, probs = decode(m.vehicle, f, np.zeros((2, 3)))
    assert len(boxes) == 2 and probs.shape == (2, 3)
    assert boxes[0].score == pytest.approx(probs[0].max())


def test_l1_box_gradient_to_regression_head():
    m = CoopTrackModel(small_cfg())
    rng = np.random.default_rng(0)
    M = rng.normal(size=(3, 16))
    target = rng.normal(size=(3, REG_DIM))
    head = m.vehicle.reg

    def loss():
        return l1_loss(head.forward(M)[0], target)

    out, cache = head.forward(M)
    m.store.zero_grad()
    head.backward(cache, np.sign(out - target) / out.size)
    for layer in head.layers:
        assert rel_error(m.store.grads[layer.wn], numeric_grad(loss, m.store.params[layer.wn])) < 1e-4


def _inst(boxes, scores, ids=None):
    n = len(boxes)
    return Instances(np.full(n, -1) if ids is None else np.asarray(ids), np.zeros((n, 4)),
                     np.asarray(boxes, dtype=float), np.asarray(scores, dtype=float), np.zeros(n, int))


def test_select_and_propagate_examples():
    box = np.zeros(9)
    box[3:6] = 1.0
    box[7:9] = [1.0, 2.0]
    ts, ids = select_and_propagate(_inst([box], [0.9]), TrackSet(), 0.5)
    assert np.allclose(ts.tracks[0].ref, [0.5, 1.0, 0.0]) and ids[0] == ts.tracks[0].track_id
    ts2, ids2 = select_and_propagate(_inst([box], [0.0], ids=ids), ts, 0.5, patience=0)
    assert len(ts2) == 0 and ids2[0] == -1
    with pytest.raises(ValueError):
        select_and_propagate(_inst([box], [0.9]), TrackSet(), 0.0)


def test_static_confident_object_keeps_one_id():
    box = np.zeros(9)
    box[3:6] = 1.0
    tracks, ids = select_and_propagate(_inst([box], [0.9]), TrackSet(), 0.1)
    seen = set(ids)
    for _ in range(20):
        tracks, ids = select_and_propagate(_inst([box], [0.9], ids=ids), tracks, 0.1)
        seen |= set(ids)
    assert len(seen) == 1


def test_propagation_is_linear_in_dt():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(4, 9))
    b[:, 3:6] = 1.0
    two = propagate_boxes(propagate_boxes(b, 0.3), 0.45)
    one = propagate_boxes(b, 0.75)
    assert np.allclose(two[:, :3], one[:, :3], atol=1e-12)


def test_compensate_latency_examples():
    msg = V2XMessage(np.ones((1, 4)), np.ones((1, 4)), np.zeros((1, 3)), np.ones(1), np.zeros(1, int))
    assert compensate_latency(msg, 0.0, [[2.0, 0.0]]) is msg
    out = compensate_latency(msg, 0.5, [[2.0, 0.0]])
    assert np.allclose(out.refs, [[1.0, 0.0, 0.0]]) and np.array_equal(out.M, msg.M)
    with pytest.raises(ValueError):
        compensate_latency(msg, -0.1, [[2.0, 0.0]])


def _boxes(xy):
    b = np.zeros((len(xy), 9))
    b[:, :2] = xy
    b[:, 3:6] = 1.0
    return b


def test_late_fuse_examples():
    v, i = _boxes([[0, 0]]), _boxes([[10, 0]])
    boxes, scores, vi, ii = late_fuse_boxes(v, [0.5], i, [0.6], Pose.identity())
    assert len(boxes) == 2 and list(vi) == [0, -1] and list(ii) == [-1, 0]
    boxes, scores, vi, ii = late_fuse_boxes(v, [0.5], v, [0.7], Pose.identity())
    assert len(boxes) == 1 and scores[0] == 0.7


@pytest.mark.parametrize("seed", range(10))
def test_late_fuse_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    v, i = _boxes(rng.uniform(0, 4, (3, 2))), _boxes(rng.uniform(0, 4, (3, 2)))
    _, _, vi, ii = late_fuse_boxes(v, np.ones(3), i, np.ones(3), Pose.identity(), gate=2.0)
    got = {(a, b) for a, b in zip(vi, ii) if a >= 0 and b >= 0}
    dist = np.linalg.norm(v[:, None, :2] - i[None, :, :2], axis=-1)
    best = None
    for perm in itertools.permutations(range(3)):
        pairs = [(r, c) for r, c in enumerate(perm) if dist[r, c] <= 2.0]
        key = (-len(pairs), sum(dist[r, c] for r, c in pairs))
        if best is None or key < best[0]:
            best = (key, set(pairs))
    assert got == best[1]


def test_empty_message_is_bit_identical_to_no_fusion():
    cfg = small_cfg()
    sc = generate_scenario(ScenarioSpec(n_frames=4, n_objects=12, feature_dim=16), 0)
    for m in (CoopTrackModel(cfg), rigged_model(cfg)):
        a = run_scenario(m, sc, StepOptions(mode="no_fusion"))
        b = run_scenario(m, sc, StepOptions(mode="coop", zero_infra=True))
        for x, y in zip(a, b):
            assert np.array_equal(x.boxes, y.boxes) and np.array_equal(x.ids, y.ids)
            assert np.array_equal(x.scores, y.scores)


def test_static_object_seen_by_both_agents_keeps_one_id():
    sc = hand_scene([ObjectSpec(10.0, 3.0)])
    outs = run_scenario(rigged_model(small_cfg()), sc, StepOptions(mode="coop"))
    assert all(len(o) == 1 for o in outs)
    assert len({int(i) for o in outs for i in o.ids}) == 1
    assert outs[0].diagnostics["n_matched"] == 1


def test_infra_only_object_appears_with_stable_id():
    sc = hand_scene([ObjectSpec(8.0, 0.0), ObjectSpec(20.0, 0.0)])
    veh_only = run_scenario(rigged_model(small_cfg()), sc, StepOptions(mode="no_fusion"))
    assert all(len(o) == 1 for o in veh_only)
    outs = run_scenario(rigged_model(small_cfg()), sc, StepOptions(mode="coop"))
    far = []
    for o in outs:
        near = np.abs(o.boxes[:, 0] - 20.0) < 1.0
        assert near.sum() == 1
        far.append(int(o.ids[near][0]))
    assert len(set(far)) == 1
    assert outs[0].tags[list(np.abs(outs[0].boxes[:, 0] - 20.0) < 1.0).index(True)] == "infra"


def test_output_bounds_and_live_ids():
    cfg = small_cfg()
    sc = generate_scenario(ScenarioSpec(n_frames=5, n_objects=15, feature_dim=16), 1)
    m = rigged_model(cfg, associate=False)
    from cooptrack.tracker import new_state, scenario_inputs, step
    state = new_state(m)
    for t in range(sc.n_frames):
        n_slots = len(state.vehicle.tracks) + cfg.n_fresh
        out, state = step(m, scenario_inputs(sc, t), state, StepOptions(mode="coop"))
        unmatched_infra = out.diagnostics["n_infra"] - out.diagnostics["n_matched"]
        assert len(out) <= n_slots + unmatched_infra
        assert set(out.ids) <= set(state.vehicle.tracks.ids())
        assert len(set(out.ids)) == len(out.ids)


def test_step_options_validation():
    with pytest.raises(ValueError):
        StepOptions(mode="dense").validate()
    with pytest.raises(ValueError):
        StepOptions(delay=-1.0).validate()
