"""The synthetic benchmark: scenario corpus and the ground-truth views used for supervision and scoring."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import Config
from .geometry import transform_boxes
from .numerics import ConfigurationError
from .scene import ScenarioSpec, default_infra, default_vehicle, generate_scenario, visible_mask

TRAIN_SEED_BASE = 1000
EVAL_SEED_BASE = 5000


def load_scenario_spec(path) -> ScenarioSpec:
    """A JSON scenario spec file, as written by ``ScenarioSpec.to_dict``."""
    path = Path(path)
    try:
        return ScenarioSpec.from_dict(json.loads(path.read_text())).validate()
    except FileNotFoundError:
        raise ConfigurationError(f"scenario spec not found: {path}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad scenario spec {path}: {exc}") from None


def spec_from_config(cfg: Config, noiseless: bool = False, **kw) -> ScenarioSpec:
    """Scenario spec from the flat config, or from ``cfg.scenario_spec`` when it names a file."""
    if cfg.scenario_spec:
        spec = load_scenario_spec(cfg.scenario_spec)
        if noiseless:
            quiet = dict(sigma_pos=0.0, sigma_dim=0.0, sigma_yaw=0.0, sigma_vel=0.0, miss_rate=0.0, clutter_rate=0.0)
            spec = dataclasses.replace(spec, vehicle=dataclasses.replace(spec.vehicle, **quiet),
                                       infra=dataclasses.replace(spec.infra, **quiet))
        return dataclasses.replace(spec, **kw)
    noise = dict(sigma_pos=0.0, sigma_dim=0.0, sigma_yaw=0.0, sigma_vel=0.0, miss_rate=0.0,
                 clutter_rate=0.0) if noiseless else dict(sigma_pos=cfg.sigma_pos)
    common = dict(height_range=cfg.height_range, domain_gap=cfg.domain_gap, **noise)
    spec = ScenarioSpec(n_frames=cfg.n_frames, rate_hz=cfg.rate_hz, n_objects=cfg.n_objects, feature_dim=cfg.d,
                        vehicle=default_vehicle(horizontal_range=cfg.vehicle_range, **common),
                        infra=default_infra(horizontal_range=cfg.infra_range, **common))
    return dataclasses.replace(spec, **kw)


def make_benchmark(cfg: Config, noiseless: bool = False, spec: ScenarioSpec = None):
    """(train scenarios, eval scenarios), deterministic in ``cfg.seed``."""
    spec = spec or spec_from_config(cfg, noiseless)
    train = [generate_scenario(spec, TRAIN_SEED_BASE + 97 * cfg.seed + i) for i in range(cfg.n_train)]
    evals = [generate_scenario(spec, EVAL_SEED_BASE + 97 * cfg.seed + i) for i in range(cfg.n_eval)]
    return train, evals


def agent_gt(scenario, kind: str, t: int):
    """(boxes, labels, ids) visible to one agent at frame t, in that agent's frame."""
    agent = scenario.agent(kind)
    boxes, labels, ids = scenario.world_boxes(t)
    vis = visible_mask(agent, scenario, t)
    return transform_boxes(boxes[vis], agent.poses[t].inverse()), labels[vis], ids[vis]


def coop_gt(scenario, t: int, ego_range: bool = False):
    """Objects visible to either agent, in the vehicle frame; optionally clipped to the ego range."""
    boxes, labels, ids = scenario.world_boxes(t)
    vis = visible_mask(scenario.vehicle, scenario, t) | visible_mask(scenario.infra, scenario, t)
    local = transform_boxes(boxes[vis], scenario.vehicle.poses[t].inverse())
    labels, ids = labels[vis], ids[vis]
    if ego_range:
        keep = in_range(local, scenario.vehicle.horizontal_range)
        local, labels, ids = local[keep], labels[keep], ids[keep]
    return local, labels, ids


def in_range(boxes, horizontal_range) -> np.ndarray:
    x0, x1, y0, y1 = horizontal_range
    boxes = np.asarray(boxes).reshape(-1, 9)
    return (boxes[:, 0] >= x0) & (boxes[:, 0] <= x1) & (boxes[:, 1] >= y0) & (boxes[:, 1] <= y1)
