"""
Training and evaluation of the three experimental set-ups.

    weak_only       the weak detector alone under its image-level loss (tag I_W)
    collaborative   both detectors trained jointly; the weak detector's max-out
                    targets supervise the strong one through the consistency loss
                    (tags CL_W and CL_S)
    cascade         a finished weak_only model labels the training images once;
                    the strong detector then trains on those fixed pseudo boxes (tag CS_S)

One image per step, plain SGD, a step learning-rate schedule. Everything random
flows from numpy generators seeded by cfg.seed, so a (config, seed) pair
determines every checkpoint and log byte.
"""

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from collabdet.collaborative_network import CollaborativeNetwork
from collabdet.config import TrainConfig
from collabdet.consistency import consistency_loss
from collabdet.errors import CollabDetError, ConfigurationError
from collabdet.evaluation import (
    corloc, ground_truth_from_scenes, mean_average_precision, records_from_detections,
    top_detections_from_records, top_records, write_detections_csv,
)
from collabdet.geometry import match_regions
from collabdet.nn_substrate import backward, reachable_parameters
from collabdet.parameter_registry import BRANCH_STRONG, BRANCH_WEAK, sgd_step
from collabdet.run_log import RUN_LOG_NAME, IterationLog, RunLog, RunLogRow
from collabdet.save_load_checkpoint import load_checkpoint, save_checkpoint
from collabdet.strong_detector import objectness_loss, supervised_loss
from collabdet.synthetic_data import augment, load_dataset
from collabdet.weak_detector import image_classification_loss, maxout

logger = logging.getLogger(__name__)

MODE_TAGS = {
    "weak_only": [("I_W", "weak")],
    "collaborative": [("CL_W", "weak"), ("CL_S", "strong")],
    "cascade": [("CS_S", "strong")],
}
CHECKPOINT_NAME = "final.ckpt"
ITERATION_LOG_NAME = "iterations.csv"
PSEUDO_LABEL_NAME = "pseudo_labels.json"
ABLATION_FIELDS = ["detector", "seeds", "median_map", "median_corloc"]


class BranchIsolationError(CollabDetError):
    """A loss reached parameters of the other detector's unshared layers."""

    category = "branch-isolation"


@dataclass
class TrainResult:
    run_log: RunLog
    checkpoint_path: str
    network: CollaborativeNetwork


@dataclass
class EvaluationResult:
    detector: str
    split: str
    map: float = None
    per_class_ap: dict = None
    corloc: float = None
    per_class_corloc: dict = None
    detections_path: str = None


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def run_directory(cfg):
    return os.path.join(cfg.output, cfg.mode)


def open_dataset(cfg):
    dataset = load_dataset(cfg.dataset)
    if dataset.n_classes != cfg.n_classes:
        raise ConfigurationError(f"Dataset has {dataset.n_classes} classes but the config says {cfg.n_classes}")
    return dataset


def training_view(scene):
    """The scene as training sees it: image and label, no boxes."""
    return dataclasses.replace(scene, gt_boxes=[])


def assert_branch_isolation(registry, loss_weak, loss_strong):
    weak_names = set(registry.names(BRANCH_WEAK))
    strong_names = set(registry.names(BRANCH_STRONG))
    leaked = reachable_parameters(loss_strong) & weak_names
    if leaked:
        raise BranchIsolationError(f"Strong loss reaches weak parameters: {sorted(leaked)}")
    leaked = reachable_parameters(loss_weak) & strong_names
    if leaked:
        raise BranchIsolationError(f"Weak loss reaches strong parameters: {sorted(leaked)}")


def _augment(scene, rng, cfg):
    return augment(training_view(scene), rng, cfg.scales, flip_probability=0.5 if cfg.flip else 0.0)


def _should_evaluate(cfg, epoch):
    return (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def collaborative_step(network: CollaborativeNetwork, scene, rng, cfg: TrainConfig):
    """
    Forward both detectors on one augmented image and build both losses.

    Returns:
        tuple: (loss_weak Tensor, loss_strong Tensor, metrics dict).
    """
    image = scene.image
    height, width = image.shape[:2]
    feature_map = network.backbone.feature_map(image)
    weak_boxes = network.sample_weak_proposals(height, width, cfg.n_weak_proposals, rng)
    weak_scores = network.weak_forward(feature_map, weak_boxes)
    loss_weak = image_classification_loss(weak_scores.y_hat, scene.label)
    targets = maxout(weak_scores.p, scene.label)

    objectness, proposals, predictions = network.strong_forward(feature_map, (height, width))
    matches = match_regions(proposals.boxes, weak_boxes, cfg.match_threshold)
    breakdown = consistency_loss(targets, weak_boxes, predictions, proposals, matches, cfg.consistency())
    pseudo_boxes = [box for _, box in targets.pseudo_boxes(weak_boxes)]
    loss_objectness = objectness_loss(objectness, network.strong.anchors(height, width), pseudo_boxes)
    loss_strong = breakdown.total if loss_objectness is None else breakdown.total + loss_objectness

    metrics = breakdown.as_dict()
    metrics["loss_weak"] = loss_weak.item()
    metrics["loss_strong"] = loss_strong.item()
    metrics["loss_objectness"] = 0.0 if loss_objectness is None else loss_objectness.item()
    return loss_weak, loss_strong, metrics


def weak_step(network: CollaborativeNetwork, scene, rng, cfg: TrainConfig):
    image = scene.image
    height, width = image.shape[:2]
    feature_map = network.backbone.feature_map(image)
    weak_boxes = network.sample_weak_proposals(height, width, cfg.n_weak_proposals, rng)
    loss_weak = image_classification_loss(network.weak_forward(feature_map, weak_boxes).y_hat, scene.label)
    return loss_weak, {"loss_weak": loss_weak.item()}


def cascade_step(network, scene, pseudo_labels, rng, cfg):
    """Supervised strong-detector loss against pseudo labels already mapped into this image."""
    image = scene.image
    height, width = image.shape[:2]
    feature_map = network.backbone.feature_map(image)
    objectness, proposals, predictions = network.strong_forward(feature_map, (height, width))
    total, _, _, foreground = supervised_loss(predictions, proposals, pseudo_labels)
    loss_objectness = objectness_loss(objectness, network.strong.anchors(height, width),
                                      [box for _, box in pseudo_labels])
    loss_strong = total if loss_objectness is None else total + loss_objectness
    return loss_strong, {
        "loss_strong": loss_strong.item(),
        "loss_objectness": 0.0 if loss_objectness is None else loss_objectness.item(),
        "matched_pairs": foreground,
    }


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def detector_thresholds(cfg, detector):
    return (cfg.weak_score_threshold if detector == "weak" else cfg.score_threshold), cfg.nms_threshold


def evaluate_network(network, scenes, detector, split, cfg, tag=None, detections_path=None):
    """
    mAP on the test split, CorLoc on the train split.

    The train split keeps only the top-scoring box per (image, class), found
    without any score threshold.
    """
    if split not in ("train", "test"):
        raise ConfigurationError(f"Unknown split {split!r}")
    score_threshold, nms_threshold = detector_thresholds(cfg, detector)
    if split == "train":
        score_threshold = 0.0
    records = []
    for scene in scenes:
        detections = network.detect(detector, scene.image, score_threshold, nms_threshold)
        records.extend(records_from_detections(scene.scene_id, detections))
    gt = ground_truth_from_scenes(scenes)
    result = EvaluationResult(tag or detector, split)
    if split == "test":
        result.map, result.per_class_ap = mean_average_precision(records, gt, network.n_classes)
    else:
        records = list(top_records(records).values())
        top = top_detections_from_records(records)
        labels = {scene.scene_id: scene.label for scene in scenes}
        result.corloc, result.per_class_corloc = corloc(top, gt, labels, network.n_classes)
    if detections_path:
        result.detections_path = write_detections_csv(detections_path, records)
    return result


def _evaluation_rows(network, dataset, cfg, epoch, epoch_means):
    rows = []
    for tag, detector in MODE_TAGS[cfg.mode]:
        test = evaluate_network(network, dataset.split("test"), detector, "test", cfg, tag)
        train = evaluate_network(network, dataset.split("train"), detector, "train", cfg, tag)
        row = RunLogRow(epoch=epoch, detector=tag, map=test.map, corloc=train.corloc,
                        loss_weak=epoch_means.get("loss_weak", 0.0),
                        loss_strong=epoch_means.get("loss_strong", 0.0),
                        cp_inter=epoch_means.get("cp_inter", 0.0),
                        cp_inner=epoch_means.get("cp_inner", 0.0),
                        cl_inter=epoch_means.get("cl_inter", 0.0),
                        matched_pairs=int(epoch_means.get("matched_pairs_total", 0)))
        logger.info(f"Epoch {epoch} {tag}: mAP {row.map:.4f}, CorLoc {row.corloc:.4f}")
        rows.append(row)
    return rows


def evaluate(checkpoint_path, split, cfg, output_dir=None):
    """
    Run every detector the checkpoint's mode provides over one split.

    Returns:
        dict: detector tag -> EvaluationResult; detections CSVs land in output_dir.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    if checkpoint.mode not in MODE_TAGS:
        raise ConfigurationError(f"Checkpoint has unknown mode {checkpoint.mode!r}")
    dataset = load_dataset(cfg.dataset)
    if checkpoint.meta.get("n_classes") != dataset.n_classes:
        raise ConfigurationError(
            f"Checkpoint was trained for {checkpoint.meta.get('n_classes')} classes, "
            f"dataset has {dataset.n_classes}")
    scenes = dataset.split(split)
    if not scenes:
        raise ConfigurationError(f"Split {split!r} of {cfg.dataset} is empty")
    network = CollaborativeNetwork.from_checkpoint(checkpoint)
    output_dir = output_dir or os.path.dirname(checkpoint_path) or "."
    results = {}
    for tag, detector in MODE_TAGS[checkpoint.mode]:
        path = os.path.join(output_dir, f"detections_{tag}_{split}.csv")
        results[tag] = evaluate_network(network, scenes, detector, split, cfg, tag, path)
        name, metric = ("mAP", results[tag].map) if split == "test" else ("CorLoc", results[tag].corloc)
        logger.info(f"{tag} on {split}: {name} {metric:.4f} ({path})")
    return results


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

class _EpochMeans:
    def __init__(self):
        self.sums = {}
        self.count = 0

    def add(self, metrics):
        self.count += 1
        for key, value in metrics.items():
            self.sums[key] = self.sums.get(key, 0.0) + float(value)

    def means(self):
        means = {key: value / max(1, self.count) for key, value in self.sums.items()}
        means["matched_pairs_total"] = self.sums.get("matched_pairs", 0.0)
        return means


def _train(cfg, network, dataset, step_fn):
    """
    Shared epoch loop. step_fn(scene, rng) performs forward, backward and update
    for one image and returns its metrics.
    """
    directory = run_directory(cfg)
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 1])
    run_log = RunLog()
    train_scenes = dataset.split("train")
    with IterationLog(os.path.join(directory, ITERATION_LOG_NAME)) as iterations:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_for_epoch(epoch)
            totals = _EpochMeans()
            for iteration, index in enumerate(rng.permutation(len(train_scenes))):
                scene = train_scenes[index]
                metrics = step_fn(scene, rng, lr)
                totals.add(metrics)
                iterations.write(epoch=epoch, iteration=iteration, image_id=scene.scene_id, lr=lr, **metrics)
                logger.debug(f"epoch {epoch} iter {iteration} {scene.scene_id}: {metrics}")
            means = totals.means()
            logger.info(f"Epoch {epoch} ({cfg.mode}, lr {lr:g}): loss_weak {means.get('loss_weak', 0.0):.4f}, "
                        f"loss_strong {means.get('loss_strong', 0.0):.4f}, "
                        f"matched pairs {int(means['matched_pairs_total'])}")
            if cfg.mode == "collaborative" and train_scenes and means["matched_pairs_total"] == 0:
                logger.warning(f"Epoch {epoch} had no matched proposal pairs; the strong detector got no "
                               "consistency signal")
            if _should_evaluate(cfg, epoch):
                for row in _evaluation_rows(network, dataset, cfg, epoch, means):
                    run_log.append(row)
    checkpoint_path = save_checkpoint(os.path.join(directory, CHECKPOINT_NAME), network.registry, cfg.mode,
                                      cfg.epochs, network.meta)
    run_log.write_csv(os.path.join(directory, RUN_LOG_NAME))
    return TrainResult(run_log, checkpoint_path, network)


def train_joint(cfg: TrainConfig, dataset=None):
    """Collaborative training: one backward of L(D_W) + L(D_S) per image."""
    if cfg.mode != "collaborative":
        cfg = cfg.replace(mode="collaborative")
    dataset = open_dataset(cfg) if dataset is None else dataset
    network = CollaborativeNetwork(cfg.network_meta(), seed=cfg.seed)

    def step(scene, rng, lr):
        augmented, _ = _augment(scene, rng, cfg)
        loss_weak, loss_strong, metrics = collaborative_step(network, augmented, rng, cfg)
        if cfg.check_isolation:
            assert_branch_isolation(network.registry, loss_weak, loss_strong)
        backward(loss_weak + loss_strong)
        sgd_step(network.registry, lr)
        return metrics

    return _train(cfg, network, dataset, step)


def train_weak_only(cfg: TrainConfig, dataset=None):
    if cfg.mode != "weak_only":
        cfg = cfg.replace(mode="weak_only")
    dataset = open_dataset(cfg) if dataset is None else dataset
    network = CollaborativeNetwork(cfg.network_meta(), seed=cfg.seed)

    def step(scene, rng, lr):
        augmented, _ = _augment(scene, rng, cfg)
        loss_weak, metrics = weak_step(network, augmented, rng, cfg)
        backward(loss_weak)
        sgd_step(network.registry, lr)
        return metrics

    return _train(cfg, network, dataset, step)


def compute_pseudo_labels(network, scenes):
    """scene id -> max-out (class, box array) pairs from the un-augmented image."""
    return {scene.scene_id: network.pseudo_labels(scene.image, scene.label) for scene in scenes}


def write_pseudo_labels(path, pseudo_labels):
    payload = {scene_id: [[c, *(float(v) for v in box)] for c, box in pairs]
               for scene_id, pairs in pseudo_labels.items()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def train_cascade(cfg: TrainConfig, dataset=None):
    """
    Label the training images once with a finished weak_only model, then train
    the strong detector on those boxes. The shared layers start from the weak model.
    """
    if cfg.mode != "cascade":
        cfg = cfg.replace(mode="cascade")
    weak_path = cfg.weak_checkpoint or os.path.join(cfg.output, "weak_only", CHECKPOINT_NAME)
    if not os.path.exists(weak_path):
        raise ConfigurationError(f"Cascade training needs a weak_only checkpoint, none at {weak_path}")
    checkpoint = load_checkpoint(weak_path)
    if checkpoint.mode != "weak_only":
        raise ConfigurationError(f"{weak_path} is a {checkpoint.mode} checkpoint, expected weak_only")
    dataset = open_dataset(cfg) if dataset is None else dataset
    if checkpoint.meta.get("n_classes") != dataset.n_classes:
        raise ConfigurationError("Weak checkpoint and dataset disagree on the number of classes")
    network = CollaborativeNetwork.from_checkpoint(checkpoint)
    pseudo_labels = compute_pseudo_labels(network, dataset.split("train"))
    os.makedirs(run_directory(cfg), exist_ok=True)
    write_pseudo_labels(os.path.join(run_directory(cfg), PSEUDO_LABEL_NAME), pseudo_labels)
    logger.info(f"Computed pseudo labels for {len(pseudo_labels)} training images from {weak_path}")

    def step(scene, rng, lr):
        augmented, transform = _augment(scene, rng, cfg)
        mapped = [(c, transform.apply_to_boxes(box)[0]) for c, box in pseudo_labels[scene.scene_id]]
        loss_strong, metrics = cascade_step(network, augmented, mapped, rng, cfg)
        backward(loss_strong)
        sgd_step(network.registry, lr)
        return metrics

    return _train(cfg, network, dataset, step)


TRAINERS = {
    "weak_only": train_weak_only,
    "collaborative": train_joint,
    "cascade": train_cascade,
}


def train(cfg: TrainConfig, dataset=None):
    return TRAINERS[cfg.mode](cfg, dataset)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def run_ablation(cfg, seeds, dataset=None):
    """
    weak_only, collaborative and cascade per seed; the cascade starts from that
    seed's weak_only model. Writes ablation.csv with median final mAP and CorLoc.

    Returns:
        dict: tag -> {"map": median, "corloc": median, "maps": [...], "corlocs": [...]}.
    """
    dataset = open_dataset(cfg) if dataset is None else dataset
    finals = {tag: {"maps": [], "corlocs": []} for tag in ("I_W", "CL_W", "CS_S", "CL_S")}
    for seed in seeds:
        base = cfg.replace(seed=seed, output=os.path.join(cfg.output, f"seed_{seed}"))
        weak = train_weak_only(base.replace(mode="weak_only"), dataset)
        joint = train_joint(base.replace(mode="collaborative"), dataset)
        cascade = train_cascade(base.replace(mode="cascade", weak_checkpoint=weak.checkpoint_path), dataset)
        for result in (weak, joint, cascade):
            for tag in result.run_log.detectors():
                row = result.run_log.final(tag)
                finals[tag]["maps"].append(row.map)
                finals[tag]["corlocs"].append(row.corloc)
    summary = {}
    for tag, values in finals.items():
        if not values["maps"]:
            continue
        summary[tag] = {"map": float(np.median(values["maps"])), "corloc": float(np.median(values["corlocs"])),
                        **values}
    os.makedirs(cfg.output, exist_ok=True)
    path = os.path.join(cfg.output, "ablation.csv")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_FIELDS)
        for tag, values in summary.items():
            writer.writerow([tag, " ".join(str(s) for s in seeds), repr(values["map"]), repr(values["corloc"])])
    for tag, values in summary.items():
        logger.info(f"{tag}: median mAP {values['map']:.4f}, median CorLoc {values['corloc']:.4f} "
                    f"over seeds {list(seeds)}")
    return summary
