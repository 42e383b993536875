"""
Finite-difference checks of both training losses on small random networks.

Each instance builds a tiny network on a random 16x16 image and compares the
analytic gradients of L(D_W) and L(D_S) (consistency plus objectness) with
central differences over a sample of coordinates of every parameter.
"""

import logging

import numpy as np

from collabdet.collaborative_network import CollaborativeNetwork
from collabdet.consistency import ConsistencyConfig, consistency_loss
from collabdet.geometry import match_regions
from collabdet.nn_substrate import grad_check
from collabdet.strong_detector import objectness_loss
from collabdet.weak_detector import ImageLabel, image_classification_loss, maxout

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
TINY_META = {
    "n_classes": 2,
    "channels": [3, 4, 4],
    "fc_width": 6,
    "roi_bins": 2,
    "anchor_scales": [6, 10],
    "rpn_pre_nms_top_k": 16,
    "rpn_nms_threshold": 0.7,
    "max_strong_proposals": 8,
}
TINY_IMAGE = 16
BIAS_OFFSET = (0.05, 0.15)


def _offset_biases(network, rng):
    """Shift every bias at least 0.05 off zero so no unit with dead inputs sits on a ReLU kink."""
    offsets = {}
    for name, tensor in network.registry:
        if name.endswith("_b"):
            size = rng.uniform(*BIAS_OFFSET, size=tensor.values.shape)
            offsets[name] = tensor.values + size * rng.choice([-1.0, 1.0], size=tensor.values.shape)
    network.registry.load_values(offsets)


def tiny_instance(seed):
    """(network, image, label, weak boxes) for one randomized check."""
    rng = np.random.default_rng(seed)
    network = CollaborativeNetwork(TINY_META, seed=seed)
    _offset_biases(network, rng)
    image = rng.uniform(0.0, 1.0, size=(TINY_IMAGE, TINY_IMAGE, 3))
    y = rng.integers(0, 2, size=TINY_META["n_classes"]).astype(np.float64)
    if not y.any():
        y[int(rng.integers(TINY_META["n_classes"]))] = 1.0
    boxes = network.sample_weak_proposals(TINY_IMAGE, TINY_IMAGE, 6, rng)
    return network, image, ImageLabel(y), boxes


def weak_loss_fn(network, image, label, boxes):
    def fn():
        scores = network.weak_forward(network.backbone.feature_map(image), boxes)
        return image_classification_loss(scores.y_hat, label)
    return fn


def strong_loss_fn(network, image, label, boxes, cfg=None):
    """
    L(D_S) with the weak targets, proposals and matches frozen at the current
    parameters, so the perturbed function stays smooth.
    """
    cfg = cfg or ConsistencyConfig()
    feature_map = network.backbone.feature_map(image)
    targets = maxout(network.weak_forward(feature_map, boxes).p, label)
    _, proposals, _ = network.strong_forward(feature_map, image.shape[:2])
    # match loosely so the tiny grid always produces pairs
    matches = match_regions(proposals.boxes, boxes, 0.0)
    anchors = network.strong.anchors(*image.shape[:2])
    pseudo = [box for _, box in targets.pseudo_boxes(boxes)]

    def fn():
        fmap = network.backbone.feature_map(image)
        objectness = network.strong.anchor_objectness(fmap)
        predictions = network.strong.predict(network.backbone.region_features(fmap, proposals.boxes), proposals)
        loss = consistency_loss(targets, boxes, predictions, proposals, matches, cfg).total
        extra = objectness_loss(objectness, anchors, pseudo)
        return loss if extra is None else loss + extra
    return fn


def run_gradient_checks(instances=20, seed=0, max_coords=10):
    """
    Returns:
        float: the worst relative error over every instance and both losses.
    """
    worst = 0.0
    for k in range(instances):
        network, image, label, boxes = tiny_instance(seed + k)
        params = [tensor for _, tensor in network.registry]
        weak_error = grad_check(weak_loss_fn(network, image, label, boxes), params, max_coords=max_coords)
        strong_error = grad_check(strong_loss_fn(network, image, label, boxes), params, max_coords=max_coords)
        logger.info(f"Instance {k}: weak loss {weak_error:.2e}, strong loss {strong_error:.2e}")
        worst = max(worst, weak_error, strong_error)
    return worst
