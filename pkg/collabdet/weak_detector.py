"""
Weakly supervised detector: two-stream region scoring trained from image labels.

For B_W regions and C classes:
    s_cls = softmax over classes of the classification stream   (rows sum to 1)
    s_loc = softmax over regions of the localization stream     (columns sum to 1)
    p     = s_cls * s_loc                                        (per-region detection score)
    y_hat = sum over regions of p                                (image-level prediction)

Since every p_jc < s_loc_jc and each s_loc column sums to 1, 0 < y_hat_c < 1.

The detector is trained with multi-label binary cross-entropy on y_hat. Its
highest-scoring region per positive class ("max-out") becomes the one-hot
pseudo target handed to the strong detector.
"""

import logging

import numpy as np

from collabdet.errors import EmptyProposalError, InvalidInputError
from collabdet.geometry import as_box_array, nms
from collabdet.nn_substrate import Tensor, clamp, fully_connected, log, relu, softmax, tensor_sum
from collabdet.parameter_registry import BRANCH_WEAK, uniform_fan_in

logger = logging.getLogger(__name__)

LOG_EPSILON = 1e-7


class ImageLabel:
    """C-dimensional binary presence vector."""

    def __init__(self, y):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if not np.all((y == 0.0) | (y == 1.0)):
            raise InvalidInputError(f"Image label components must be 0 or 1, got {y.tolist()}")
        self.y = y

    @property
    def n_classes(self):
        return len(self.y)

    @property
    def positive_classes(self):
        return [int(c) for c in np.flatnonzero(self.y)]

    def to_list(self):
        return [int(v) for v in self.y]

    def __eq__(self, other):
        return isinstance(other, ImageLabel) and np.array_equal(self.y, other.y)

    def __repr__(self):
        return f"ImageLabel({self.to_list()})"


class WeakScores:
    """
    Two-stream scores for one image.

    Attributes:
        s_cls (Tensor): (B_W, C), each row a distribution over classes.
        s_loc (Tensor): (B_W, C), each column a distribution over regions.
        p (Tensor): (B_W, C) detection scores s_cls * s_loc.
        y_hat (Tensor): (C,) image-level prediction, column sums of p.
    """

    def __init__(self, s_cls, s_loc, p, y_hat):
        self.s_cls = s_cls
        self.s_loc = s_loc
        self.p = p
        self.y_hat = y_hat

    @property
    def n_regions(self):
        return self.p.shape[0]

    def __repr__(self):
        return f"WeakScores(regions={self.p.shape[0]}, classes={self.p.shape[1]})"


class MaxoutTargets:
    """
    One-hot pseudo targets.

    Attributes:
        p_hat (np.ndarray): (B_W, C); column c is one-hot at selected[c] when y_c = 1, else zeros.
        selected (dict): positive class -> winning region index.
    """

    def __init__(self, p_hat, selected):
        self.p_hat = p_hat
        self.selected = selected

    def pseudo_boxes(self, region_boxes):
        """(class, box array) for every positive class, ordered by class."""
        boxes = as_box_array(region_boxes)
        return [(c, boxes[j].copy()) for c, j in sorted(self.selected.items())]

    def __repr__(self):
        return f"MaxoutTargets(selected={self.selected})"


class WeakDetector:
    """
    Weak branch head on top of the shared fc7 features.

    One unshared hidden layer, then the classification and localization streams.
    """

    def __init__(self, registry, rng, n_classes, in_width=64, hidden_width=64):
        self.n_classes = n_classes
        self.fc_w = registry.register("weak/fc_w", uniform_fan_in(rng, (in_width, hidden_width), in_width),
                                      BRANCH_WEAK)
        self.fc_b = registry.register("weak/fc_b", np.zeros(hidden_width), BRANCH_WEAK)
        self.cls_w = registry.register("weak/cls_w", uniform_fan_in(rng, (hidden_width, n_classes), hidden_width),
                                       BRANCH_WEAK)
        self.cls_b = registry.register("weak/cls_b", np.zeros(n_classes), BRANCH_WEAK)
        self.loc_w = registry.register("weak/loc_w", uniform_fan_in(rng, (hidden_width, n_classes), hidden_width),
                                       BRANCH_WEAK)
        self.loc_b = registry.register("weak/loc_b", np.zeros(n_classes), BRANCH_WEAK)

    def stream_logits(self, region_features):
        hidden = relu(fully_connected(region_features, self.fc_w, self.fc_b))
        return (fully_connected(hidden, self.cls_w, self.cls_b),
                fully_connected(hidden, self.loc_w, self.loc_b))

    def score_regions(self, region_features):
        if region_features.shape[0] == 0:
            raise EmptyProposalError("The weak detector needs at least one region")
        cls_logits, loc_logits = self.stream_logits(region_features)
        return scores_from_logits(cls_logits, loc_logits)


def scores_from_logits(cls_logits, loc_logits):
    """Two-stream aggregation from raw (B_W, C) stream outputs."""
    if cls_logits.shape[0] == 0:
        raise EmptyProposalError("The weak detector needs at least one region")
    if cls_logits.shape != loc_logits.shape:
        raise InvalidInputError(f"Stream shapes differ: {cls_logits.shape} vs {loc_logits.shape}")
    s_cls = softmax(cls_logits, axis=1)
    s_loc = softmax(loc_logits, axis=0)
    p = s_cls * s_loc
    return WeakScores(s_cls, s_loc, p, tensor_sum(p, axis=0))


def image_classification_loss(y_hat, label, epsilon=LOG_EPSILON):
    """
    Multi-label binary cross-entropy:
        L = -sum_c [ y_c log y_hat_c + (1 - y_c) log(1 - y_hat_c) ]
    with y_hat clamped to [epsilon, 1 - epsilon].
    """
    if not isinstance(label, ImageLabel):
        label = ImageLabel(label)
    if y_hat.shape != label.y.shape:
        raise InvalidInputError(f"Prediction shape {y_hat.shape} != label shape {label.y.shape}")
    y = label.y
    bounded = clamp(y_hat, epsilon, 1.0 - epsilon)
    per_class = y * log(bounded) + (1.0 - y) * log(1.0 - bounded)
    return -tensor_sum(per_class)


def maxout(p, label):
    """
    Keep only the highest-scoring region of each positive class.

    p may be a Tensor or an array; the result carries no gradient. Ties go to the
    lowest region index.
    """
    if not isinstance(label, ImageLabel):
        label = ImageLabel(label)
    values = p.values if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != label.n_classes:
        raise InvalidInputError(f"Score matrix {values.shape} does not match {label.n_classes} classes")
    p_hat = np.zeros_like(values)
    selected = {}
    for c in label.positive_classes:
        j = int(np.argmax(values[:, c]))
        p_hat[j, c] = 1.0
        selected[c] = j
    return MaxoutTargets(p_hat, selected)


def filter_detections(boxes, scores, score_threshold, nms_threshold):
    """
    Per-class score filter followed by NMS.

    Args:
        boxes (np.ndarray): (N, 4) shared by every class, or (N, C, 4) per class.
        scores (np.ndarray): (N, C).

    Returns:
        list[tuple]: (box array, class, score), grouped by class, each group in NMS order.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    detections = []
    for c in range(scores.shape[1]):
        class_boxes = boxes if boxes.ndim == 2 else boxes[:, c, :]
        valid = ((scores[:, c] > score_threshold)
                 & (class_boxes[:, 2] > class_boxes[:, 0]) & (class_boxes[:, 3] > class_boxes[:, 1]))
        index = np.flatnonzero(valid)
        if index.size == 0:
            continue
        for k in nms(class_boxes[index], scores[index, c], nms_threshold):
            detections.append((class_boxes[index[k]].copy(), c, float(scores[index[k], c])))
    return detections
