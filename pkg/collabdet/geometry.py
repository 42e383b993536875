"""
Axis-aligned box arithmetic shared by both detectors and the evaluator.

Boxes are continuous corner coordinates (x1, y1, x2, y2) in pixels. Areas are
(x2 - x1) * (y2 - y1) with no +1 pixel convention.

Deltas use the usual proposal-relative parameterization:
    dx = (cx_t - cx_p) / w_p      dy = (cy_t - cy_p) / h_p
    dw = log(w_t / w_p)           dh = log(h_t / h_p)

Everything here is a pure function over immutable inputs. Functions that take
"boxes" accept either a list of Box objects or an (N, 4) array.
"""

import math
from dataclasses import dataclass

import numpy as np

from collabdet.errors import InvalidInputError

# exp() overflows a float64 above this argument
MAX_EXP_ARGUMENT = 709.0

# regions are matched when their IoU is strictly above this value
DEFAULT_MATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise InvalidInputError(f"Box coordinates must be finite, got {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidInputError(f"Box must have positive area, got {coords}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def __iter__(self):
        yield self.x1
        yield self.y1
        yield self.x2
        yield self.y2

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(values):
        x1, y1, x2, y2 = (float(v) for v in values)
        return Box(x1, y1, x2, y2)

    def __repr__(self):
        return f"Box({self.x1:g}, {self.y1:g}, {self.x2:g}, {self.y2:g})"


@dataclass(frozen=True)
class Delta:
    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dw, self.dh)):
            raise InvalidInputError("Delta components must be finite")

    def __iter__(self):
        yield self.dx
        yield self.dy
        yield self.dw
        yield self.dh

    def as_array(self):
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


class MatchSet:
    """
    Sparse strong-to-weak region pairing.

    Attributes:
        pairs (list): (strong index i, weak index j, IoU) triples, ordered by i.
            Every i appears at most once and every IoU is above the match threshold.
    """

    def __init__(self, pairs=None):
        self.pairs = list(pairs or [])

    @property
    def strong_indices(self):
        return np.array([i for i, _, _ in self.pairs], dtype=np.int64)

    @property
    def weak_indices(self):
        return np.array([j for _, j, _ in self.pairs], dtype=np.int64)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __eq__(self, other):
        return isinstance(other, MatchSet) and self.pairs == other.pairs

    def __repr__(self):
        return f"MatchSet(pairs={self.pairs})"


def as_box_array(boxes):
    """Return boxes as a float64 (N, 4) array. Accepts Box lists or arrays."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        boxes = list(boxes)
        if not boxes:
            return np.zeros((0, 4), dtype=np.float64)
        arr = np.array([list(b) for b in boxes], dtype=np.float64)
    if arr.ndim == 1 and arr.size == 4:
        arr = arr[None, :]
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise InvalidInputError(f"Expected boxes of shape (N, 4), got {arr.shape}")
    return arr


def check_boxes(arr):
    """Raise InvalidInputError unless every row is a finite, positive-area box."""
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("Box coordinates must be finite")
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise InvalidInputError("Boxes must have positive area")


def box_areas(arr):
    return (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])


def iou_matrix(a, b):
    """Pairwise IoU between two box sets, shape (len(a), len(b))."""
    a = as_box_array(a)
    b = as_box_array(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    check_boxes(a)
    check_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(0.0, ix2 - ix1) * np.maximum(0.0, iy2 - iy1)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    return inter / union


def iou(a: Box, b: Box):
    """IoU of two boxes; 0 when disjoint."""
    return float(iou_matrix(a, b)[0, 0])


def encode_deltas(proposals, targets):
    """Row-wise delta encoding of targets relative to proposals, shape (N, 4)."""
    p = as_box_array(proposals)
    t = as_box_array(targets)
    if p.shape != t.shape:
        raise InvalidInputError(f"Proposal/target count mismatch: {p.shape} vs {t.shape}")
    if len(p) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    check_boxes(p)
    check_boxes(t)
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    pcx = p[:, 0] + 0.5 * pw
    pcy = p[:, 1] + 0.5 * ph
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    tcx = t[:, 0] + 0.5 * tw
    tcy = t[:, 1] + 0.5 * th
    return np.stack([(tcx - pcx) / pw, (tcy - pcy) / ph, np.log(tw / pw), np.log(th / ph)], axis=1)


def decode_deltas(proposals, deltas):
    """Inverse of encode_deltas. No clipping to image bounds happens here."""
    p = as_box_array(proposals)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if len(p) != len(d):
        raise InvalidInputError(f"Proposal/delta count mismatch: {len(p)} vs {len(d)}")
    if len(p) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("Deltas must be finite")
    if np.any(d[:, 2:] > MAX_EXP_ARGUMENT):
        raise InvalidInputError("Delta scale overflows exp()")
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    cx = p[:, 0] + 0.5 * pw + d[:, 0] * pw
    cy = p[:, 1] + 0.5 * ph + d[:, 1] * ph
    w = pw * np.exp(d[:, 2])
    h = ph * np.exp(d[:, 3])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if not np.all(np.isfinite(out)):
        raise InvalidInputError("Decoded box is not finite")
    return out


def encode_delta(proposal, target):
    return Delta(*encode_deltas(proposal, target)[0])


def decode_delta(proposal, d):
    return Box.from_array(decode_deltas(proposal, np.asarray(list(d), dtype=np.float64))[0])


def clip_boxes(boxes, width, height):
    """Clip boxes to the image rectangle [0, width] x [0, height]."""
    arr = as_box_array(boxes).copy()
    arr[:, [0, 2]] = np.clip(arr[:, [0, 2]], 0.0, width)
    arr[:, [1, 3]] = np.clip(arr[:, [1, 3]], 0.0, height)
    return arr


def flip_boxes(boxes, width):
    """Mirror boxes horizontally inside an image of the given width."""
    arr = as_box_array(boxes)
    return np.stack([width - arr[:, 2], arr[:, 1], width - arr[:, 0], arr[:, 3]], axis=1)


def match_regions(strong, weak, threshold=DEFAULT_MATCH_THRESHOLD):
    """
    Pair every strong box with its closest weak box.

    For each strong box i the closest weak box is j* = argmax_j IoU(i, j), ties to
    the lowest j. The pair is kept only when IoU(i, j*) > threshold.
    """
    overlaps = iou_matrix(strong, weak)
    if overlaps.size == 0:
        return MatchSet()
    best = overlaps.argmax(axis=1)
    pairs = []
    for i, j in enumerate(best):
        value = float(overlaps[i, j])
        if value > threshold:
            pairs.append((i, int(j), value))
    return MatchSet(pairs)


def nms(boxes, scores, iou_threshold):
    """
    Greedy non-maximum suppression.

    Boxes are visited in descending score order (ties to the lower index). A box
    is suppressed when its IoU with an already kept box exceeds iou_threshold.

    Returns:
        list[int]: kept indices in selection order.
    """
    arr = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(arr) != len(scores):
        raise InvalidInputError(f"nms got {len(arr)} boxes but {len(scores)} scores")
    if len(arr) == 0:
        return []
    check_boxes(arr)
    order = np.argsort(-scores, kind="stable")
    areas = box_areas(arr)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        xx1 = np.maximum(arr[i, 0], arr[rest, 0])
        yy1 = np.maximum(arr[i, 1], arr[rest, 1])
        xx2 = np.minimum(arr[i, 2], arr[rest, 2])
        yy2 = np.minimum(arr[i, 3], arr[rest, 3])
        inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return keep
