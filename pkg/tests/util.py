"""Small builders shared by the unit tests."""
import numpy as np

from cooptrack.mdfe import QuerySet
from cooptrack.scene import Detections


def dets_at(xy):
    n = len(xy)
    boxes = np.zeros((n, 9))
    boxes[:, :2] = xy
    boxes[:, 3:6] = [1.9, 4.5, 1.6]
    return Detections(boxes, np.zeros(n, int), np.full(n, 0.8), np.ones((n, 4)), np.arange(n))


def queries_at(refs, track_ids, d=4):
    refs = np.asarray(refs, dtype=float).reshape(-1, 3)
    ids = np.asarray(track_ids)
    boxes = np.zeros((len(refs), 9))
    boxes[:, :3] = refs
    boxes[:, 3:6] = 1.0
    return QuerySet(np.zeros((len(refs), d)), refs, ids >= 0, ids, boxes, np.zeros(len(refs), int))
