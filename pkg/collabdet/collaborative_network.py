"""
The two detectors on one shared backbone, plus the inference entry points.
"""

import logging

import numpy as np

from collabdet.backbone import FEATURE_STRIDE, Backbone
from collabdet.errors import ConfigurationError
from collabdet.geometry import clip_boxes
from collabdet.parameter_registry import ParameterRegistry
from collabdet.strong_detector import StrongDetector, anchor_grid, detections_from_predictions
from collabdet.weak_detector import WeakDetector, filter_detections, maxout

logger = logging.getLogger(__name__)

# fraction of the box side each weak-proposal corner may move when jittered
PROPOSAL_JITTER = 0.15
MIN_PROPOSAL_SIDE = 4.0

DEFAULT_META = {
    "n_classes": 4,
    "channels": [8, 16, 16],
    "fc_width": 64,
    "roi_bins": 2,
    "anchor_scales": [14, 24],
    "rpn_pre_nms_top_k": 200,
    "rpn_nms_threshold": 0.7,
    "max_strong_proposals": 32,
}


class CollaborativeNetwork:
    """
    Backbone, weak detector and strong detector over a single ParameterRegistry.

    meta holds the architecture; it is stored in every checkpoint so a model can
    be rebuilt before its values are loaded.
    """

    def __init__(self, meta=None, seed=0):
        self.meta = dict(DEFAULT_META)
        self.meta.update(meta or {})
        rng = np.random.default_rng(seed)
        self.registry = ParameterRegistry()
        self.n_classes = int(self.meta["n_classes"])
        self.backbone = Backbone(self.registry, rng, channels=self.meta["channels"],
                                 fc_width=self.meta["fc_width"], roi_bins=self.meta["roi_bins"])
        fc_width = self.meta["fc_width"]
        self.weak = WeakDetector(self.registry, rng, self.n_classes, in_width=fc_width, hidden_width=fc_width)
        self.strong = StrongDetector(self.registry, rng, self.n_classes,
                                     feature_channels=self.meta["channels"][-1],
                                     stride=FEATURE_STRIDE,
                                     anchor_scales=self.meta["anchor_scales"],
                                     in_width=fc_width, hidden_width=fc_width,
                                     pre_nms_top_k=self.meta["rpn_pre_nms_top_k"],
                                     rpn_nms_threshold=self.meta["rpn_nms_threshold"],
                                     max_proposals=self.meta["max_strong_proposals"])

    @classmethod
    def from_checkpoint(cls, checkpoint):
        network = cls(checkpoint.meta)
        missing = [name for name in network.registry.names() if name not in checkpoint.values]
        if missing:
            raise ConfigurationError(f"Checkpoint lacks parameters: {', '.join(missing)}")
        try:
            network.registry.load_values(checkpoint.values)
        except ValueError as exc:
            raise ConfigurationError(f"Checkpoint does not fit the network: {exc}") from exc
        return network

    # --- proposals -----------------------------------------------------------

    def dense_weak_proposals(self, height, width):
        """Every anchor of the grid, used for weak scoring at test time and for pseudo labels."""
        return anchor_grid(height, width, FEATURE_STRIDE, self.meta["anchor_scales"])

    def sample_weak_proposals(self, height, width, count, rng):
        """count jittered grid boxes, drawn without replacement when the grid is large enough."""
        grid = self.dense_weak_proposals(height, width)
        chosen = rng.choice(len(grid), size=count, replace=count > len(grid))
        boxes = grid[chosen].copy()
        sides = np.repeat(boxes[:, 2:] - boxes[:, :2], 2, axis=1)[:, [0, 2, 1, 3]]
        boxes += rng.uniform(-PROPOSAL_JITTER, PROPOSAL_JITTER, size=boxes.shape) * sides
        boxes = clip_boxes(boxes, width, height)
        # keep a minimum side so every region still covers a feature cell
        boxes[:, 2] = np.maximum(boxes[:, 2], np.minimum(boxes[:, 0] + MIN_PROPOSAL_SIDE, width))
        boxes[:, 0] = np.minimum(boxes[:, 0], boxes[:, 2] - MIN_PROPOSAL_SIDE)
        boxes[:, 3] = np.maximum(boxes[:, 3], np.minimum(boxes[:, 1] + MIN_PROPOSAL_SIDE, height))
        boxes[:, 1] = np.minimum(boxes[:, 1], boxes[:, 3] - MIN_PROPOSAL_SIDE)
        return boxes

    # --- forward passes ------------------------------------------------------

    def weak_forward(self, feature_map, boxes):
        return self.weak.score_regions(self.backbone.region_features(feature_map, boxes))

    def strong_forward(self, feature_map, image_size):
        """Objectness over all anchors, the selected proposals and their head outputs."""
        objectness = self.strong.anchor_objectness(feature_map)
        proposals = self.strong.generate_proposals(feature_map, image_size, objectness=objectness)
        if len(proposals) == 0:
            return objectness, proposals, self.strong.predict(None, proposals)
        features = self.backbone.region_features(feature_map, proposals.boxes)
        return objectness, proposals, self.strong.predict(features, proposals)

    def pseudo_labels(self, image, label):
        """Max-out boxes of the weak detector over the dense grid: [(class, box array), ...]."""
        height, width = image.shape[:2]
        boxes = self.dense_weak_proposals(height, width)
        scores = self.weak_forward(self.backbone.feature_map(image), boxes)
        return maxout(scores.p, label).pseudo_boxes(boxes)

    # --- inference -----------------------------------------------------------

    def weak_detect(self, image, score_threshold=1e-3, nms_threshold=0.6):
        """Dense proposals scored by p, filtered, then per-class NMS. Boxes are the raw proposals."""
        height, width = image.shape[:2]
        boxes = self.dense_weak_proposals(height, width)
        scores = self.weak_forward(self.backbone.feature_map(image), boxes)
        return filter_detections(boxes, scores.p.values, score_threshold, nms_threshold)

    def strong_detect(self, image, score_threshold=0.05, nms_threshold=0.6):
        height, width = image.shape[:2]
        _, proposals, predictions = self.strong_forward(self.backbone.feature_map(image), (height, width))
        return detections_from_predictions(proposals.boxes, predictions.p.values, predictions.t.values,
                                           (height, width), score_threshold, nms_threshold)

    def detect(self, detector, image, score_threshold, nms_threshold):
        if detector == "weak":
            return self.weak_detect(image, score_threshold, nms_threshold)
        if detector == "strong":
            return self.strong_detect(image, score_threshold, nms_threshold)
        raise ConfigurationError(f"Unknown detector {detector!r}")

    def __repr__(self):
        return f"CollaborativeNetwork(classes={self.n_classes}, {self.registry!r})"
