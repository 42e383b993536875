"""
Named trainable arrays shared between the two detector branches.

Each entry belongs to one branch: "shared" (backbone layers referenced by both
detectors), "weak" or "strong". Iteration always follows registration order so
updates and checkpoints are bit-reproducible.
"""

import logging
from collections import OrderedDict

import numpy as np

from collabdet.errors import InvalidInputError
from collabdet.nn_substrate import parameter

logger = logging.getLogger(__name__)

BRANCH_SHARED = "shared"
BRANCH_WEAK = "weak"
BRANCH_STRONG = "strong"
BRANCHES = (BRANCH_SHARED, BRANCH_WEAK, BRANCH_STRONG)


def uniform_fan_in(rng, shape, fan_in):
    """Weights drawn from U(-sqrt(6 / fan_in), sqrt(6 / fan_in))."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class ParameterRegistry:
    """
    Ordered map from parameter name to trainable Tensor.

    Attributes:
        entries (OrderedDict): name -> Tensor leaf.
        branches (dict): name -> one of BRANCHES.
    """

    def __init__(self):
        self.entries = OrderedDict()
        self.branches = {}

    def register(self, name, values, branch):
        if branch not in BRANCHES:
            raise InvalidInputError(f"Unknown branch {branch!r}")
        if name in self.entries:
            raise InvalidInputError(f"Parameter {name!r} is already registered")
        tensor = parameter(values, name=name)
        self.entries[name] = tensor
        self.branches[name] = branch
        return tensor

    def get(self, name):
        return self.entries[name]

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self):
        return len(self.entries)

    def names(self, branch=None):
        if branch is None:
            return list(self.entries)
        return [name for name in self.entries if self.branches[name] == branch]

    def zero_grad(self):
        for tensor in self.entries.values():
            tensor.zero_grad()

    def gradients(self):
        """Copy of every accumulated gradient, keyed by name."""
        return OrderedDict((name, t.grad.copy()) for name, t in self.entries.items())

    def values(self):
        """Copy of every parameter array, keyed by name."""
        return OrderedDict((name, t.values.copy()) for name, t in self.entries.items())

    def load_values(self, values):
        """Overwrite parameters in place from a name -> array mapping."""
        for name, array in values.items():
            if name not in self.entries:
                raise InvalidInputError(f"Unknown parameter {name!r}")
            target = self.entries[name]
            array = np.asarray(array, dtype=np.float64)
            if array.shape != target.values.shape:
                raise InvalidInputError(
                    f"Parameter {name!r} shape {array.shape} != {target.values.shape}")
            target.values[...] = array

    def parameter_count(self):
        return sum(t.values.size for t in self.entries.values())

    def __repr__(self):
        return f"ParameterRegistry(entries={len(self.entries)}, parameters={self.parameter_count()})"


def sgd_step(registry: ParameterRegistry, lr: float):
    """
    Plain SGD: w <- w - lr * grad for every entry, then clear the gradients.

    Nothing is written unless every updated value is finite.
    """
    updated = [(tensor, tensor.values - lr * tensor.grad) for tensor in registry.entries.values()]
    for tensor, values in updated:
        if not np.all(np.isfinite(values)):
            raise InvalidInputError(f"Parameter {tensor.name!r} would become non-finite")
    for tensor, values in updated:
        tensor.values[...] = values
    registry.zero_grad()
    return registry
