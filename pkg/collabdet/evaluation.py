"""
VOC-style detection metrics.

A detection is a true positive when its IoU with a not yet matched ground-truth
box of the same class is strictly greater than 0.5. Detections are visited in
descending score order (ties keep input order), each matches the gt box it
overlaps most, and duplicates of an already matched box count as false
positives. AP is the area under the all-point interpolated precision-recall curve.
"""

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from collabdet.errors import ConfigurationError, InvalidInputError
from collabdet.geometry import Box, as_box_array, iou_matrix

logger = logging.getLogger(__name__)

DETECTION_FIELDS = ["image_id", "class", "score", "x1", "y1", "x2", "y2"]
TP_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_index: int
    score: float
    box: Box

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InvalidInputError(f"Detection score {self.score} is outside [0, 1]")

    def as_row(self):
        return [self.image_id, self.class_index, repr(float(self.score)), *(repr(float(v)) for v in self.box)]


def records_from_detections(image_id, detections):
    """Wrap (box array, class, score) triples from a detector."""
    return [DetectionRecord(image_id, int(c), float(score), Box.from_array(box)) for box, c, score in detections]


def write_detections_csv(path, records):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(DETECTION_FIELDS)
        for record in records:
            writer.writerow(record.as_row())
    return path


def read_detections_csv(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"Detection file not found: {path}")
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != DETECTION_FIELDS:
            raise ConfigurationError(f"Unexpected detection header {reader.fieldnames}")
        return [
            DetectionRecord(row["image_id"], int(row["class"]), float(row["score"]),
                            Box(float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"])))
            for row in reader
        ]


def ground_truth_from_scenes(scenes):
    """image id -> list of (Box, class)."""
    return {scene.scene_id: list(scene.gt_boxes) for scene in scenes}


def _class_boxes(gt, image_id, class_index):
    return as_box_array([box for box, c in gt.get(image_id, []) if c == class_index])


def average_precision(detections, gt, class_index, iou_threshold=TP_IOU_THRESHOLD):
    """
    AP for one class, or None when no image has a gt box of that class.

    Args:
        detections (list[DetectionRecord]): any order, any classes.
        gt (dict): image id -> list of (Box, class).
    """
    n_positive = sum(1 for pairs in gt.values() for _, c in pairs if c == class_index)
    if n_positive == 0:
        return None
    records = [r for r in detections if r.class_index == class_index]
    if not records:
        return 0.0
    order = np.argsort(-np.array([r.score for r in records]), kind="stable")
    matched = {image_id: np.zeros(len(_class_boxes(gt, image_id, class_index)), dtype=bool) for image_id in gt}
    tp = np.zeros(len(records))
    for rank, k in enumerate(order):
        record = records[k]
        boxes = _class_boxes(gt, record.image_id, class_index)
        if len(boxes) == 0:
            continue
        overlaps = iou_matrix(record.box.as_array(), boxes)[0]
        best = int(overlaps.argmax())
        if overlaps[best] > iou_threshold and not matched[record.image_id][best]:
            matched[record.image_id][best] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    recall = tp_cum / n_positive
    precision = tp_cum / np.arange(1, len(records) + 1)
    return all_point_ap(recall, precision)


def all_point_ap(recall, precision):
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(detections, gt, n_classes, iou_threshold=TP_IOU_THRESHOLD):
    """
    Returns:
        tuple: (mean AP over classes with a gt box, {class: AP} for those classes).
            The mean is 0.0 when no class has ground truth.
    """
    per_class = {}
    for c in range(n_classes):
        ap = average_precision(detections, gt, c, iou_threshold)
        if ap is not None:
            per_class[c] = ap
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class


def top_records(records):
    """(image id, class) -> highest-scoring record, first one on ties."""
    best = {}
    for record in records:
        key = (record.image_id, record.class_index)
        if key not in best or record.score > best[key].score:
            best[key] = record
    return best


def top_detections_from_records(records):
    """(image id, class) -> box of the top record."""
    return {key: record.box for key, record in top_records(records).items()}


def corloc(top_detections, gt, labels, n_classes, iou_threshold=TP_IOU_THRESHOLD):
    """
    Fraction of positive images whose top box for a class hits a gt box of that class.

    Args:
        top_detections (dict): (image id, class) -> Box; a missing entry is a miss.
        gt (dict): image id -> list of (Box, class).
        labels (dict): image id -> ImageLabel; an image is positive for c when its label says so.

    Returns:
        tuple: (mean over classes with a positive image, {class: CorLoc}).
    """
    per_class = {}
    for c in range(n_classes):
        positives = [image_id for image_id, label in labels.items() if label.y[c] == 1.0]
        if not positives:
            continue
        hits = 0
        for image_id in positives:
            box = top_detections.get((image_id, c))
            boxes = _class_boxes(gt, image_id, c)
            if box is None or len(boxes) == 0:
                continue
            if iou_matrix(as_box_array(box), boxes).max() > iou_threshold:
                hits += 1
        per_class[c] = hits / len(positives)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class
