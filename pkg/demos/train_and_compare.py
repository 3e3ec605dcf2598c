"""
Training a small cooperative tracker
====================================

A cut-down benchmark (8 scenarios of 4 s) trained with the two-stage
recipe: each agent's tracker alone first, then the cooperative modules
and both trackers together. The stage-1 model is the no-fusion and
late-fusion baseline. Takes about two minutes on one core.
"""
import time

from cooptrack.benchmark import make_benchmark
from cooptrack.config import Config
from cooptrack.evaluation import robustness_sweep, run_benchmark
from cooptrack.tracker import CoopTrackModel, StepOptions
from cooptrack.training import stage1_train, stage2_train

cfg = Config(n_scenarios=8, n_train=5, duration_s=4.0, epochs_stage1=6, epochs_stage2=4)
train, evals = make_benchmark(cfg)
model = CoopTrackModel(cfg)

t0 = time.time()
for kind in ("vehicle", "infra"):
    res = stage1_train(model, kind, train)
    print(f"stage 1 {kind:8s} loss {res.losses[0].total:7.3f} -> {res.losses[-1].total:7.3f}")
baseline = CoopTrackModel(cfg)
baseline.store.load_state_dict(model.store.state_dict())
res = stage2_train(model, train)
print(f"stage 2          loss {res.losses[0].total:7.3f} -> {res.losses[-1].total:7.3f}  ({time.time() - t0:.0f}s)")

print(f"\n{'mode':12s} {'AMOTA':>6s} {'mAP':>6s} {'IDS':>4s} {'B/s':>8s}")
for name, m, mode in (("no_fusion", baseline, "no_fusion"), ("late_fusion", baseline, "late_fusion"),
                      ("coop", model, "coop")):
    rep, _ = run_benchmark(m, evals, StepOptions(mode=mode))
    print(f"{name:12s} {rep.amota:6.3f} {rep.map:6.3f} {rep.ids:4d} {rep.bps:8.0f}")

# Stale infrastructure messages: extrapolating them with their decoded velocity
# recovers most of what a half-second delay costs.
for comp in (False, True):
    curve = robustness_sweep("latency", [0, 300, 500], model, evals, StepOptions(compensate=comp))
    print(("compensated  " if comp else "raw          ") + "  ".join(f"{lv:.0f} ms: {r.amota:.3f}" for lv, r in curve))
