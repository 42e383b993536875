"""
Layers shared by both detectors.

conv1 -> relu -> 2x pool -> conv2 -> relu -> 2x pool -> conv3 -> relu gives a
feature map at stride 4. Region features come from roi_pool on that map followed
by two fully connected layers (fc6, fc7). All of it is registered under the
"shared" branch, so the weak and strong losses both reach these weights.
"""

import numpy as np

from collabdet.errors import InvalidInputError
from collabdet.nn_substrate import Tensor, conv2d, fully_connected, max_pool, relu, roi_pool
from collabdet.parameter_registry import BRANCH_SHARED, uniform_fan_in

FEATURE_STRIDE = 4
KERNEL_SIZE = 3


class Backbone:
    def __init__(self, registry, rng, channels=(8, 16, 16), fc_width=64, roi_bins=2, in_channels=3):
        self.channels = tuple(channels)
        if len(self.channels) < 2:
            raise InvalidInputError("The backbone needs at least two conv layers (two 2x pools)")
        self.fc_width = fc_width
        self.roi_bins = (roi_bins, roi_bins)
        self.convs = []
        previous = in_channels
        for index, out_channels in enumerate(self.channels, start=1):
            fan_in = previous * KERNEL_SIZE * KERNEL_SIZE
            w = registry.register(f"shared/conv{index}_w",
                                  uniform_fan_in(rng, (out_channels, previous, KERNEL_SIZE, KERNEL_SIZE), fan_in),
                                  BRANCH_SHARED)
            b = registry.register(f"shared/conv{index}_b", np.zeros(out_channels), BRANCH_SHARED)
            self.convs.append((w, b))
            previous = out_channels
        pooled_width = previous * roi_bins * roi_bins
        self.fc6_w = registry.register("shared/fc6_w", uniform_fan_in(rng, (pooled_width, fc_width), pooled_width),
                                       BRANCH_SHARED)
        self.fc6_b = registry.register("shared/fc6_b", np.zeros(fc_width), BRANCH_SHARED)
        self.fc7_w = registry.register("shared/fc7_w", uniform_fan_in(rng, (fc_width, fc_width), fc_width),
                                       BRANCH_SHARED)
        self.fc7_b = registry.register("shared/fc7_b", np.zeros(fc_width), BRANCH_SHARED)

    def feature_map(self, image):
        """(H, W, 3) image in [0, 1] -> (C, H / 4, W / 4) feature Tensor."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise InvalidInputError(f"Expected an (H, W, channels) image, got {image.shape}")
        x = Tensor(image.transpose(2, 0, 1))
        for index, (w, b) in enumerate(self.convs):
            x = relu(conv2d(x, w, b, padding="same"))
            if index < 2:
                x = max_pool(x, 2)
        return x

    def region_features(self, feature_map, boxes):
        """Pooled fc7 features for each box, shape (N, fc_width)."""
        pooled = roi_pool(feature_map, boxes, self.roi_bins, spatial_scale=1.0 / FEATURE_STRIDE)
        flat = pooled.reshape(pooled.shape[0], -1)
        hidden = relu(fully_connected(flat, self.fc6_w, self.fc6_b))
        return relu(fully_connected(hidden, self.fc7_w, self.fc7_b))
