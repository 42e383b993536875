"""
Synthetic shapes detection dataset.

Scenes are drawn off-screen with pygame: a textured noise background, a few
distractor strokes and dots, then one to three filled shapes. Training only ever
sees the image and its class-presence label; the ground-truth boxes are kept for
evaluation.

On disk a dataset is a directory with

    manifest.json          scenes, labels, boxes and split membership
    images/<id>.rgb        uint32 LE height, uint32 LE width, then row-major 8-bit RGB
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

# surfaces are drawn off-screen; no window is ever opened
os.environ.setdefault("SDL_VIDEODRIVER", "dummy")
os.environ.setdefault("SDL_AUDIODRIVER", "dummy")
import pygame  # noqa: E402

from collabdet.errors import ConfigurationError, InvalidInputError
from collabdet.geometry import Box, as_box_array, flip_boxes, iou_matrix
from collabdet.weak_detector import ImageLabel

logger = logging.getLogger(__name__)

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross")
SPLITS = ("train", "test")
MANIFEST_NAME = "manifest.json"
IMAGE_DIR = "images"
MANIFEST_VERSION = 1

MIN_OBJECTS = 1
MAX_OBJECTS = 3
MIN_SIZE_FRACTION = 0.19
MAX_SIZE_FRACTION = 0.44
MIN_BOX_SIDE = 6
MAX_OBJECT_OVERLAP = 0.3
PLACEMENT_RETRIES = 50
SCENE_RETRIES = 20
DEFAULT_SCALES = (0.75, 1.0, 1.25)

# integer mixed into the seed of the class-assignment stream
CLASS_STREAM = 7919


@dataclass
class SyntheticScene:
    """
    One image with its weak label and held-out boxes.

    Attributes:
        scene_id (str): e.g. "train_0007".
        split (str): "train" or "test".
        pixels (np.ndarray): (H, W, 3) uint8.
        label (ImageLabel): class presence.
        gt_boxes (list): (Box, class) pairs, evaluation only.
    """
    scene_id: str
    split: str
    pixels: np.ndarray
    label: ImageLabel
    gt_boxes: list = field(default_factory=list)

    @property
    def image(self):
        """Float image in [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def gt_arrays(self):
        """(boxes (N, 4), classes (N,)) for the evaluator."""
        boxes = as_box_array([b for b, _ in self.gt_boxes])
        classes = np.array([c for _, c in self.gt_boxes], dtype=np.int64)
        return boxes, classes


class SyntheticDataset:
    def __init__(self, scenes, n_classes, image_size, seed):
        self.scenes = list(scenes)
        self.n_classes = n_classes
        self.image_size = image_size
        self.seed = seed

    @property
    def class_names(self):
        return list(SHAPE_NAMES[:self.n_classes])

    def split(self, name):
        if name not in SPLITS:
            raise ConfigurationError(f"Unknown split {name!r}; expected one of {', '.join(SPLITS)}")
        return [scene for scene in self.scenes if scene.split == name]

    def __len__(self):
        return len(self.scenes)

    def __repr__(self):
        return (f"SyntheticDataset(scenes={len(self.scenes)}, classes={self.n_classes}, "
                f"image_size={self.image_size}, seed={self.seed})")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _noise_background(rng, size):
    """Smooth colour blobs plus fine grain."""
    coarse = rng.uniform(40.0, 150.0, size=(size // 8 + 1, size // 8 + 1, 3))
    smooth = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    grain = rng.normal(0.0, 12.0, size=(size, size, 3))
    return np.clip(smooth + grain, 0, 255).astype(np.uint8)


def _random_colour(rng, low=90, high=256):
    return tuple(int(v) for v in rng.integers(low, high, size=3))


def _draw_distractors(surface, rng, size):
    for _ in range(int(rng.integers(2, 5))):
        start = tuple(int(v) for v in rng.integers(0, size, size=2))
        end = tuple(int(v) for v in rng.integers(0, size, size=2))
        pygame.draw.line(surface, _random_colour(rng, 60), start, end, int(rng.integers(1, 3)))
    for _ in range(int(rng.integers(3, 7))):
        centre = tuple(int(v) for v in rng.integers(0, size, size=2))
        pygame.draw.circle(surface, _random_colour(rng, 60), centre, int(rng.integers(1, 3)))


def draw_shape(surface, shape, rect, colour):
    """Draw one filled shape inside rect = (x, y, side, side)."""
    x, y, side, _ = rect
    if shape == "disk":
        pygame.draw.ellipse(surface, colour, pygame.Rect(rect))
    elif shape == "square":
        pygame.draw.rect(surface, colour, pygame.Rect(rect))
    elif shape == "triangle":
        pygame.draw.polygon(surface, colour, [(x + side // 2, y), (x, y + side - 1), (x + side - 1, y + side - 1)])
    elif shape == "ring":
        pygame.draw.ellipse(surface, colour, pygame.Rect(rect), max(2, side // 5))
    elif shape == "cross":
        bar = max(2, side // 3)
        offset = (side - bar) // 2
        pygame.draw.rect(surface, colour, pygame.Rect(x + offset, y, bar, side))
        pygame.draw.rect(surface, colour, pygame.Rect(x, y + offset, side, bar))
    else:
        raise InvalidInputError(f"Unknown shape {shape!r}")


def surface_to_pixels(surface):
    return np.ascontiguousarray(pygame.surfarray.array3d(surface).transpose(1, 0, 2)).astype(np.uint8)


def pixels_to_surface(pixels):
    height, width = pixels.shape[:2]
    surface = pygame.Surface((width, height), 0, 24)
    pygame.surfarray.blit_array(surface, np.ascontiguousarray(pixels.transpose(1, 0, 2)))
    return surface


class _PlacementFailed(Exception):
    pass


def _place_objects(rng, classes, size):
    """Square boxes with pairwise IoU at most MAX_OBJECT_OVERLAP."""
    placed = []
    low = max(MIN_BOX_SIDE, int(round(MIN_SIZE_FRACTION * size)))
    high = max(low, int(round(MAX_SIZE_FRACTION * size)))
    for _ in classes:
        for _ in range(PLACEMENT_RETRIES):
            side = int(rng.integers(low, high + 1))
            x = int(rng.integers(0, size - side + 1))
            y = int(rng.integers(0, size - side + 1))
            candidate = np.array([[x, y, x + side, y + side]], dtype=np.float64)
            if not placed or iou_matrix(candidate, np.array(placed)).max() <= MAX_OBJECT_OVERLAP:
                placed.append(candidate[0])
                break
        else:
            raise _PlacementFailed()
    return placed


def render_scene(rng, classes, size, n_classes):
    """
    Draw a scene containing one object per entry of classes.

    Returns:
        tuple: (pixels, [(Box, class), ...]).
    """
    for attempt in range(SCENE_RETRIES):
        try:
            boxes = _place_objects(rng, classes, size)
        except _PlacementFailed:
            logger.warning(f"Could not place {len(classes)} objects on attempt {attempt}, regenerating the scene")
            continue
        surface = pixels_to_surface(_noise_background(rng, size))
        _draw_distractors(surface, rng, size)
        gt = []
        for c, box in zip(classes, boxes):
            x1, y1, x2, _ = (int(v) for v in box)
            draw_shape(surface, SHAPE_NAMES[c], (x1, y1, x2 - x1, x2 - x1), _random_colour(rng))
            gt.append((Box.from_array(box), int(c)))
        return surface_to_pixels(surface), gt
    raise InvalidInputError(f"Unable to place {len(classes)} objects in a {size}x{size} image")


def _class_stream(rng, n_classes):
    """Endless round-robin over shuffled blocks of all classes."""
    while True:
        for c in rng.permutation(n_classes):
            yield int(c)


def generate_dataset(seed=0, n_train=400, n_test=100, n_classes=4, image_size=64):
    """
    Deterministic train/test scenes.

    Object classes cycle through shuffled blocks of every class, so class
    frequencies stay close to uniform. Each scene draws its geometry and colours
    from its own generator seeded by (seed, scene index).
    """
    if not 2 <= n_classes <= len(SHAPE_NAMES):
        raise ConfigurationError(f"n_classes must be between 2 and {len(SHAPE_NAMES)}, got {n_classes}")
    if image_size < 32 or image_size % 4:
        raise ConfigurationError(f"image_size must be a multiple of 4 and at least 32, got {image_size}")
    if n_train < 0 or n_test < 0:
        raise ConfigurationError("Scene counts must be non-negative")
    class_stream = _class_stream(np.random.default_rng([seed, CLASS_STREAM]), n_classes)
    scenes = []
    index = 0
    for split, count in (("train", n_train), ("test", n_test)):
        for k in range(count):
            rng = np.random.default_rng([seed, index])
            n_objects = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
            classes = [next(class_stream) for _ in range(n_objects)]
            pixels, gt = render_scene(rng, classes, image_size, n_classes)
            y = np.zeros(n_classes)
            y[sorted(set(classes))] = 1.0
            scenes.append(SyntheticScene(f"{split}_{k:04d}", split, pixels, ImageLabel(y), gt))
            index += 1
    logger.info(f"Generated {n_train} train and {n_test} test scenes "
                f"({n_classes} classes, {image_size}px, seed {seed})")
    return SyntheticDataset(scenes, n_classes, image_size, seed)


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------

def image_bytes(pixels):
    height, width = pixels.shape[:2]
    return struct.pack("<II", height, width) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def parse_image(data):
    if len(data) < 8:
        raise ConfigurationError("Truncated image header")
    height, width = struct.unpack("<II", data[:8])
    expected = 8 + height * width * 3
    if len(data) != expected:
        raise ConfigurationError(f"Image payload has {len(data) - 8} bytes, expected {expected - 8}")
    return np.frombuffer(data[8:], dtype=np.uint8).reshape(height, width, 3).copy()


def manifest_dict(dataset):
    return {
        "version": MANIFEST_VERSION,
        "seed": dataset.seed,
        "n_classes": dataset.n_classes,
        "class_names": dataset.class_names,
        "image_size": dataset.image_size,
        "scenes": [
            {
                "id": scene.scene_id,
                "split": scene.split,
                "label": scene.label.to_list(),
                "gt_boxes": [[c, *(float(v) for v in box)] for box, c in scene.gt_boxes],
                "image_file": f"{IMAGE_DIR}/{scene.scene_id}.rgb",
            }
            for scene in dataset.scenes
        ],
    }


def manifest_text(dataset):
    return json.dumps(manifest_dict(dataset), indent=2, sort_keys=True) + "\n"


def save_dataset(dataset, directory):
    os.makedirs(os.path.join(directory, IMAGE_DIR), exist_ok=True)
    for scene in dataset.scenes:
        with open(os.path.join(directory, IMAGE_DIR, f"{scene.scene_id}.rgb"), "wb") as f:
            f.write(image_bytes(scene.pixels))
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        f.write(manifest_text(dataset))
    logger.info(f"Wrote {len(dataset)} scenes to {directory}")
    return path


def load_dataset(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ConfigurationError(f"No dataset manifest at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"Corrupt manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigurationError(f"Unsupported manifest version {manifest.get('version')}")
    scenes = []
    for entry in manifest["scenes"]:
        image_path = os.path.join(directory, entry["image_file"])
        if not os.path.exists(image_path):
            raise ConfigurationError(f"Missing image file {image_path}")
        with open(image_path, "rb") as f:
            pixels = parse_image(f.read())
        gt = [(Box(*values[1:]), int(values[0])) for values in entry["gt_boxes"]]
        scenes.append(SyntheticScene(entry["id"], entry["split"], pixels, ImageLabel(entry["label"]), gt))
    return SyntheticDataset(scenes, manifest["n_classes"], manifest["image_size"], manifest["seed"])


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageTransform:
    """Horizontal flip (applied first) followed by a rescale."""
    flipped: bool
    source_width: int
    scale_x: float
    scale_y: float

    def apply_to_boxes(self, boxes):
        arr = as_box_array(boxes)
        if len(arr) == 0:
            return arr
        if self.flipped:
            arr = flip_boxes(arr, self.source_width)
        return arr * np.array([self.scale_x, self.scale_y, self.scale_x, self.scale_y])


def rescaled_size(size, scale):
    """Nearest multiple of 4 to size * scale, at least 4."""
    return max(4, int(round(size * scale / 4.0)) * 4)


def rescale_pixels(pixels, height, width):
    if pixels.shape[:2] == (height, width):
        return pixels.copy()
    return surface_to_pixels(pygame.transform.smoothscale(pixels_to_surface(pixels), (width, height)))


def augment(scene, seed, scales=DEFAULT_SCALES, flip_probability=0.5, flip=None):
    """
    Random horizontal flip and rescale.

    seed may be an int or a numpy Generator. flip forces (True) or forbids (False)
    the mirror; None draws it with flip_probability.

    Returns:
        tuple: (augmented SyntheticScene, ImageTransform).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    do_flip = bool(rng.random() < flip_probability) if flip is None else bool(flip)
    scale = float(scales[int(rng.integers(len(scales)))]) if len(scales) else 1.0
    height, width = scene.height, scene.width
    new_height, new_width = rescaled_size(height, scale), rescaled_size(width, scale)
    pixels = scene.pixels[:, ::-1] if do_flip else scene.pixels
    pixels = rescale_pixels(np.ascontiguousarray(pixels), new_height, new_width)
    transform = ImageTransform(do_flip, width, new_width / width, new_height / height)
    gt = []
    for box, c in scene.gt_boxes:
        gt.append((Box.from_array(transform.apply_to_boxes(box)[0]), c))
    return SyntheticScene(scene.scene_id, scene.split, pixels, scene.label, gt), transform
