"""
Prediction consistency loss between the two detectors.

Over matched (strong proposal i, weak region j) pairs and object classes c:

    cp_inter = -beta       * sum p_hat_jc * log p_ic
    cp_inner = -(1 - beta) * sum p_ic     * log p_ic
    cl_inter =               sum p_hat_jc * smooth_l1(t_jc - t_ic)

t_jc encodes weak box j relative to proposal i; t_ic is the strong delta for
class c. Weak-side quantities are plain arrays, so this loss only reaches the
strong branch and, through it, the shared layers.
"""

import logging
from dataclasses import dataclass

import numpy as np

from collabdet.errors import InvalidInputError
from collabdet.geometry import DEFAULT_MATCH_THRESHOLD, as_box_array, encode_deltas
from collabdet.nn_substrate import Tensor, clamp, log, tensor_sum
from collabdet.nn_substrate import smooth_l1 as elementwise_smooth_l1

logger = logging.getLogger(__name__)

LOG_EPSILON = 1e-7


@dataclass(frozen=True)
class ConsistencyConfig:
    beta: float = 0.8
    match_threshold: float = DEFAULT_MATCH_THRESHOLD
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise InvalidInputError(f"beta must lie in (0, 1), got {self.beta}")


class ConsistencyBreakdown:
    """
    Loss parts as Tensors. total = cp_inter + cp_inner + cl_inter, divided by
    max(1, matched_pairs) when normalization is on (the parts are divided too).
    """

    def __init__(self, total, cp_inter, cp_inner, cl_inter, matched_pairs):
        self.total = total
        self.cp_inter = cp_inter
        self.cp_inner = cp_inner
        self.cl_inter = cl_inter
        self.matched_pairs = matched_pairs

    @classmethod
    def empty(cls):
        return cls(Tensor(0.0), Tensor(0.0), Tensor(0.0), Tensor(0.0), 0)

    def as_dict(self):
        return {
            "loss_strong": self.total.item(),
            "cp_inter": self.cp_inter.item(),
            "cp_inner": self.cp_inner.item(),
            "cl_inter": self.cl_inter.item(),
            "matched_pairs": self.matched_pairs,
        }

    def __repr__(self):
        parts = self.as_dict()
        return (f"ConsistencyBreakdown(total={parts['loss_strong']:.4f}, cp_inter={parts['cp_inter']:.4f}, "
                f"cp_inner={parts['cp_inner']:.4f}, cl_inter={parts['cl_inter']:.4f}, "
                f"matched_pairs={self.matched_pairs})")


def smooth_l1(x):
    """Smooth-L1 summed over the last axis (the 4 delta coordinates)."""
    if isinstance(x, Tensor):
        return tensor_sum(elementwise_smooth_l1(x), axis=-1)
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1.0
    return np.where(small, 0.5 * x ** 2, np.abs(x) - 0.5).sum(axis=-1)


def consistency_loss(p_hat, weak_boxes, strong, proposals, matches, cfg=None, epsilon=LOG_EPSILON):
    """
    Args:
        p_hat (MaxoutTargets): one-hot weak targets, (B_W, C).
        weak_boxes: the B_W weak region boxes.
        strong (StrongPredictions): p (B_S, C + 1) and t (B_S, C, 4).
        proposals (ProposalSet): the B_S strong proposals.
        matches (MatchSet): pairs from match_regions(proposals, weak_boxes).
        cfg (ConsistencyConfig): beta and normalization.

    Returns:
        ConsistencyBreakdown
    """
    cfg = cfg or ConsistencyConfig()
    if len(matches) == 0:
        return ConsistencyBreakdown.empty()
    targets = np.asarray(p_hat.p_hat, dtype=np.float64)
    weak = as_box_array(weak_boxes)
    if len(weak) != targets.shape[0]:
        raise InvalidInputError(f"{len(weak)} weak boxes for {targets.shape[0]} target rows")
    n_classes = strong.n_classes
    if targets.shape[1] != n_classes:
        raise InvalidInputError(f"Weak targets have {targets.shape[1]} classes, strong head {n_classes}")
    strong_index = np.asarray(matches.strong_indices, dtype=np.int64)
    weak_index = np.asarray(matches.weak_indices, dtype=np.int64)

    q = targets[weak_index]                                   # (M, C), constant
    p = strong.p[strong_index][:, :n_classes]                 # (M, C), foreground columns
    log_p = log(clamp(p, epsilon, None))
    cp_inter = -cfg.beta * tensor_sum(q * log_p)
    cp_inner = -(1.0 - cfg.beta) * tensor_sum(p * log_p)

    weak_deltas = encode_deltas(proposals.boxes[strong_index], weak[weak_index])   # (M, 4)
    difference = strong.t[strong_index] - weak_deltas[:, None, :]                  # (M, C, 4)
    cl_inter = tensor_sum(q * smooth_l1(difference))

    if cfg.normalize:
        scale = 1.0 / max(1, len(matches))
        cp_inter, cp_inner, cl_inter = cp_inter * scale, cp_inner * scale, cl_inter * scale
    total = cp_inter + cp_inner + cl_inter
    return ConsistencyBreakdown(total, cp_inter, cp_inner, cl_inter, len(matches))
