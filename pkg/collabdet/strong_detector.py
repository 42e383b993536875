"""
Strongly supervised detector: online proposals, background-aware classification
and class-wise box regression.

Proposals come from a dense grid of square anchors, one per feature cell and
anchor scale, in scan order (row, column, scale). A 1x1 convolution followed by a
sigmoid scores every anchor. The top-K anchors by objectness go through NMS and
are capped to the configured number of proposals.

The classification head emits C + 1 probabilities per proposal. Columns 0..C-1
are the object classes, column C is background. The regression head emits one
(dx, dy, dw, dh) delta per proposal and object class.
"""

import logging

import numpy as np

from collabdet.errors import InvalidInputError
from collabdet.geometry import as_box_array, clip_boxes, decode_deltas, encode_deltas, iou_matrix, nms
from collabdet.nn_substrate import (
    Tensor, clamp, conv2d, fully_connected, log, relu, sigmoid, smooth_l1, softmax, take, tensor_sum, transpose,
)
from collabdet.parameter_registry import BRANCH_STRONG, uniform_fan_in
from collabdet.weak_detector import filter_detections

logger = logging.getLogger(__name__)

LOG_EPSILON = 1e-7
MAX_DELTA_SCALE = float(np.log(1000.0 / 16.0))
OBJECTNESS_POSITIVE_IOU = 0.5
OBJECTNESS_NEGATIVE_IOU = 0.3
FOREGROUND_IOU = 0.5


class ProposalSet:
    """
    Selected proposals for one image.

    Attributes:
        boxes (np.ndarray): (B_S, 4) boxes inside the image.
        objectness (np.ndarray): (B_S,) scores in [0, 1].
        anchor_indices (np.ndarray): (B_S,) positions in the full anchor grid.
    """

    def __init__(self, boxes, objectness, anchor_indices=None):
        self.boxes = as_box_array(boxes)
        self.objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
        if len(self.boxes) != len(self.objectness):
            raise InvalidInputError(f"{len(self.boxes)} proposal boxes but {len(self.objectness)} scores")
        if anchor_indices is None:
            anchor_indices = np.arange(len(self.boxes))
        self.anchor_indices = np.asarray(anchor_indices, dtype=np.int64)

    def __len__(self):
        return len(self.boxes)

    def __repr__(self):
        return f"ProposalSet(size={len(self.boxes)})"


class StrongPredictions:
    """
    Per-proposal head outputs.

    Attributes:
        p (Tensor): (B_S, C + 1), rows are distributions; column C is background.
        t (Tensor): (B_S, C, 4) class-wise deltas.
    """

    def __init__(self, p, t):
        self.p = p
        self.t = t

    @property
    def n_classes(self):
        return self.t.shape[1]

    def __len__(self):
        return self.p.shape[0]

    def __repr__(self):
        return f"StrongPredictions(proposals={self.p.shape[0]}, classes={self.t.shape[1]})"


def anchor_grid(image_height, image_width, stride, scales):
    """
    Square anchors centred on every feature cell, clipped to the image.

    Returns:
        np.ndarray: (rows * cols * len(scales), 4) in scan order (row, column, scale).
    """
    rows, cols = image_height // stride, image_width // stride
    if rows <= 0 or cols <= 0:
        raise InvalidInputError(f"Image {image_height}x{image_width} is smaller than the stride {stride}")
    cy = (np.arange(rows) + 0.5) * stride
    cx = (np.arange(cols) + 0.5) * stride
    half = 0.5 * np.asarray(scales, dtype=np.float64)
    cy = np.broadcast_to(cy[:, None, None], (rows, cols, len(half)))
    cx = np.broadcast_to(cx[None, :, None], (rows, cols, len(half)))
    half = np.broadcast_to(half[None, None, :], (rows, cols, len(half)))
    boxes = np.stack([cx - half, cy - half, cx + half, cy + half], axis=-1).reshape(-1, 4)
    return clip_boxes(boxes, image_width, image_height)


def select_proposals(anchors, objectness, pre_nms_top_k, nms_threshold, max_proposals):
    """
    Top-K by objectness (ties keep scan order), NMS, then cap.

    Returns:
        list[int]: anchor indices in selection order.
    """
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    order = np.argsort(-objectness, kind="stable")[:pre_nms_top_k]
    kept = nms(as_box_array(anchors)[order], objectness[order], nms_threshold)
    return [int(order[k]) for k in kept[:max_proposals]]


class StrongDetector:
    """Strong branch: objectness layer plus the region heads above the shared fc7 features."""

    def __init__(self, registry, rng, n_classes, feature_channels, stride, anchor_scales=(14, 24),
                 in_width=64, hidden_width=64, pre_nms_top_k=200, rpn_nms_threshold=0.7, max_proposals=32):
        self.n_classes = n_classes
        self.stride = stride
        self.anchor_scales = tuple(anchor_scales)
        self.pre_nms_top_k = pre_nms_top_k
        self.rpn_nms_threshold = rpn_nms_threshold
        self.max_proposals = max_proposals
        n_scales = len(self.anchor_scales)
        self.rpn_w = registry.register("strong/rpn_w",
                                       uniform_fan_in(rng, (n_scales, feature_channels, 1, 1), feature_channels),
                                       BRANCH_STRONG)
        self.rpn_b = registry.register("strong/rpn_b", np.zeros(n_scales), BRANCH_STRONG)
        self.fc_w = registry.register("strong/fc_w", uniform_fan_in(rng, (in_width, hidden_width), in_width),
                                      BRANCH_STRONG)
        self.fc_b = registry.register("strong/fc_b", np.zeros(hidden_width), BRANCH_STRONG)
        self.cls_w = registry.register("strong/cls_w",
                                       uniform_fan_in(rng, (hidden_width, n_classes + 1), hidden_width),
                                       BRANCH_STRONG)
        self.cls_b = registry.register("strong/cls_b", np.zeros(n_classes + 1), BRANCH_STRONG)
        # regression starts small so early decoded boxes stay near their proposals
        self.bbox_w = registry.register("strong/bbox_w",
                                        0.01 * uniform_fan_in(rng, (hidden_width, 4 * n_classes), hidden_width),
                                        BRANCH_STRONG)
        self.bbox_b = registry.register("strong/bbox_b", np.zeros(4 * n_classes), BRANCH_STRONG)

    def anchors(self, image_height, image_width):
        return anchor_grid(image_height, image_width, self.stride, self.anchor_scales)

    def anchor_objectness(self, feature_map):
        """Sigmoid objectness for every anchor, flattened in scan order."""
        logits = conv2d(feature_map, self.rpn_w, self.rpn_b, padding="same")
        return sigmoid(transpose(logits, (1, 2, 0)).reshape(-1))

    def generate_proposals(self, feature_map, image_size, objectness=None):
        """
        Proposals for an image of image_size = (height, width).

        objectness may be passed in when the caller already holds the anchor scores.
        """
        height, width = image_size
        anchors = self.anchors(height, width)
        if objectness is None:
            objectness = self.anchor_objectness(feature_map)
        scores = objectness.values if isinstance(objectness, Tensor) else np.asarray(objectness)
        if len(scores) != len(anchors):
            raise InvalidInputError(f"{len(scores)} objectness scores for {len(anchors)} anchors")
        chosen = select_proposals(anchors, scores, self.pre_nms_top_k, self.rpn_nms_threshold, self.max_proposals)
        return ProposalSet(anchors[chosen], scores[chosen], chosen)

    def predict(self, region_features, proposals):
        count = len(proposals)
        if count == 0:
            return StrongPredictions(Tensor(np.zeros((0, self.n_classes + 1))),
                                     Tensor(np.zeros((0, self.n_classes, 4))))
        if region_features.shape[0] != count:
            raise InvalidInputError(f"{region_features.shape[0]} feature rows for {count} proposals")
        hidden = relu(fully_connected(region_features, self.fc_w, self.fc_b))
        p = softmax(fully_connected(hidden, self.cls_w, self.cls_b), axis=1)
        t = fully_connected(hidden, self.bbox_w, self.bbox_b).reshape(count, self.n_classes, 4)
        return StrongPredictions(p, t)


def binary_cross_entropy(scores, targets, epsilon=LOG_EPSILON):
    """Mean BCE of a score Tensor against a 0/1 array of the same shape."""
    bounded = clamp(scores, epsilon, 1.0 - epsilon)
    per_item = targets * log(bounded) + (1.0 - targets) * log(1.0 - bounded)
    return -tensor_sum(per_item) / float(max(1, targets.size))


def objectness_targets(anchors, pseudo_boxes, positive_iou=OBJECTNESS_POSITIVE_IOU,
                       negative_iou=OBJECTNESS_NEGATIVE_IOU):
    """
    Objectness labels from pseudo boxes: 1 above positive_iou, 0 below negative_iou,
    -1 (ignored) in between.
    """
    anchors = as_box_array(anchors)
    pseudo = as_box_array(pseudo_boxes)
    if len(pseudo) == 0:
        best = np.zeros(len(anchors))
    else:
        best = iou_matrix(anchors, pseudo).max(axis=1)
    labels = np.full(len(anchors), -1.0)
    labels[best > positive_iou] = 1.0
    labels[best < negative_iou] = 0.0
    return labels


def objectness_loss(objectness, anchors, pseudo_boxes):
    """BCE over anchors with a definite objectness label; None when every anchor is ignored."""
    labels = objectness_targets(anchors, pseudo_boxes)
    index = np.flatnonzero(labels >= 0.0)
    if index.size == 0:
        return None
    return binary_cross_entropy(take(objectness, index), labels[index])


def proposal_targets(proposal_boxes, pseudo_labels, n_classes, foreground_iou=FOREGROUND_IOU):
    """
    Assign each proposal the class of its best pseudo box when IoU >= foreground_iou,
    background (index n_classes) otherwise.

    Args:
        pseudo_labels (list[tuple]): (class, box array) pairs.

    Returns:
        tuple: (labels (B_S,) int array, matched box array (B_S, 4), NaN rows for background).
    """
    proposals = as_box_array(proposal_boxes)
    labels = np.full(len(proposals), n_classes, dtype=np.int64)
    targets = np.full((len(proposals), 4), np.nan)
    if not pseudo_labels or len(proposals) == 0:
        return labels, targets
    classes = np.array([c for c, _ in pseudo_labels], dtype=np.int64)
    boxes = as_box_array([b for _, b in pseudo_labels])
    overlaps = iou_matrix(proposals, boxes)
    best = overlaps.argmax(axis=1)
    foreground = overlaps[np.arange(len(proposals)), best] >= foreground_iou
    labels[foreground] = classes[best[foreground]]
    targets[foreground] = boxes[best[foreground]]
    return labels, targets


def supervised_loss(predictions, proposals, pseudo_labels, epsilon=LOG_EPSILON):
    """
    Standard detection loss against fixed pseudo labels.

    Cross-entropy over C + 1 classes averaged over proposals, plus smooth-L1 on the
    labelled class's deltas averaged over foreground proposals.

    Returns:
        tuple: (total Tensor, classification Tensor, regression Tensor or None, foreground count).
    """
    count = len(predictions)
    if count == 0:
        zero = Tensor(0.0)
        return zero, zero, None, 0
    labels, targets = proposal_targets(proposals.boxes, pseudo_labels, predictions.n_classes)
    picked = take(predictions.p, (np.arange(count), labels))
    classification = -tensor_sum(log(clamp(picked, epsilon, None))) / float(count)
    foreground = np.flatnonzero(labels < predictions.n_classes)
    if foreground.size == 0:
        return classification, classification, None, 0
    wanted = encode_deltas(proposals.boxes[foreground], targets[foreground])
    predicted = take(predictions.t, (foreground, labels[foreground]))
    regression = tensor_sum(smooth_l1(predicted - wanted)) / float(foreground.size)
    return classification + regression, classification, regression, int(foreground.size)


def detections_from_predictions(proposal_boxes, p, t, image_size, score_threshold, nms_threshold):
    """
    Decode class-wise deltas, clip to the image, filter by score and run per-class NMS.

    Args:
        proposal_boxes (np.ndarray): (B_S, 4).
        p (np.ndarray): (B_S, C + 1) probabilities.
        t (np.ndarray): (B_S, C, 4) deltas.
        image_size (tuple): (height, width).

    Returns:
        list[tuple]: (box array, class, score).
    """
    proposals = as_box_array(proposal_boxes)
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if len(proposals) == 0:
        return []
    height, width = image_size
    n_classes = t.shape[1]
    deltas = t.copy()
    deltas[:, :, 2:] = np.minimum(deltas[:, :, 2:], MAX_DELTA_SCALE)
    decoded = np.empty_like(deltas)
    for c in range(n_classes):
        decoded[:, c, :] = clip_boxes(decode_deltas(proposals, deltas[:, c, :]), width, height)
    return filter_detections(decoded, p[:, :n_classes], score_threshold, nms_threshold)
