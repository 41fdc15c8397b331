"""Synthetic task streams with a controllable shortcut cue.

Every class owns a fixed 7x7 binary glyph (its intrinsic feature). Two
generators add a spurious cue that agrees with the label on a ``bias_ratio``
fraction of training samples:

``color_shortcut``
    the glyph is drawn in the class's hue, otherwise in a hue drawn uniformly
    from the cue set (so it may coincide with the class hue by chance).
``patch_background``
    a white glyph sits on a dim noise background that also holds a small
    striped patch; the patch texture is the class's own, otherwise a
    uniformly drawn one.

By default every class owns a distinct cue. ``num_cues=k`` recycles cues so
that class ``c`` carries cue ``c % k``; with ``k = classes_per_task`` every
task reuses the same colours and a cue learned early becomes ambiguous later.
"""

from __future__ import annotations

import colorsys
import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

GENERATORS = ("color_shortcut", "patch_background")
VARIANTS = ("full", "only_fg", "only_bg")
N_HUES = 10


@dataclass(frozen=True)
class StreamConfig:
    generator: str = "color_shortcut"
    num_tasks: int = 2
    classes_per_task: int = 2
    samples_per_class: int = 500
    test_samples_per_class: int = 200
    image_size: int = 32
    bias_ratio: float = 0.95
    noise_std: float = 0.05
    variant: str = "full"
    num_cues: int = 0
    seed: int = 0

    @property
    def num_classes(self):
        return self.num_tasks * self.classes_per_task

    @property
    def cue_count(self):
        """Distinct cues in use; class ``c`` owns cue ``c % cue_count``."""
        return self.num_cues or self.num_classes

    def validate(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_tasks < 1 or self.classes_per_task < 1 or self.samples_per_class < 1:
            raise ValueError("num_tasks, classes_per_task and samples_per_class must be positive")
        if self.test_samples_per_class < 1:
            raise ValueError("test_samples_per_class must be positive")
        if not 0 <= self.bias_ratio <= 1:
            raise ValueError(f"bias_ratio must lie in [0, 1], got {self.bias_ratio}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.num_cues < 0:
            raise ValueError(f"num_cues must be >= 0, got {self.num_cues}")
        if self.num_classes > N_HUES or self.cue_count > N_HUES:
            raise ValueError(f"{self.num_classes} classes exceed the {N_HUES} distinguishable cues")


@dataclass
class Sample:
    image: np.ndarray
    label: int
    shortcut_region: np.ndarray
    carries_shortcut: bool


@dataclass
class Split:
    """Images (n, 3, H, W) in [0, 1] with labels and ground-truth cue annotations.

    ``cue`` is the palette/texture index actually rendered; ``shortcut_region``
    marks the pixels holding the class cue when ``carries_shortcut`` is set.
    """

    images: np.ndarray
    labels: np.ndarray
    carries_shortcut: np.ndarray
    shortcut_region: np.ndarray
    cue: np.ndarray

    def __len__(self):
        return len(self.labels)

    def sample(self, i):
        return Sample(self.images[i], int(self.labels[i]), self.shortcut_region[i],
                      bool(self.carries_shortcut[i]))

    def subset(self, idx):
        return Split(self.images[idx], self.labels[idx], self.carries_shortcut[idx],
                     self.shortcut_region[idx], self.cue[idx])


@dataclass
class Task:
    task_id: int
    classes: list
    train: Split
    tests: dict = field(default_factory=dict)

    def batches(self, batch_size):
        """Yield the one-pass training stream in its fixed shuffled order."""
        for start in range(0, len(self.train), batch_size):
            yield self.train.subset(slice(start, start + batch_size))


@dataclass
class TaskStream:
    config: StreamConfig
    tasks: list

    @property
    def unbiased_split(self):
        return "unbiased" if self.config.generator == "color_shortcut" else "only_fg"

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)


# ---------------------------------------------------------------- primitives

def palette():
    """Ten evenly spaced saturated hues as RGB rows."""
    return np.array([colorsys.hsv_to_rgb(i / N_HUES, 1.0, 1.0) for i in range(N_HUES)], dtype=np.float32)


def glyph(class_id):
    """Deterministic 7x7 binary stencil for a class, independent of any stream seed."""
    rng = np.random.default_rng([0x5EED, class_id])
    while True:
        g = rng.random((7, 7)) < 0.5
        if 18 <= g.sum() <= 31 and g.any(axis=0).all() and g.any(axis=1).all():
            return g


def _upscale(stencil, factor):
    return np.kron(stencil, np.ones((factor, factor), dtype=bool))


def stripe_texture(class_id, size, num_textures=N_HUES):
    """Coloured sinusoidal stripes with a class-specific orientation, frequency and hue."""
    theta = np.pi * class_id / num_textures
    freq = 0.25 + 0.08 * (class_id % 3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    rgb = palette()[(class_id * 3) % N_HUES]
    return (wave[None] * rgb[:, None, None]).astype(np.float32)


def mutual_information(x, y):
    """Plug-in mutual information (bits) between two discrete label arrays."""
    x = np.asarray(x)
    y = np.asarray(y)
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log2(joint[nz] / (px @ py)[nz])).sum())


def dominant_hue(image, threshold=0.5):
    """Palette index closest to the mean colour of the bright pixels."""
    bright = image.max(axis=0) > threshold
    if not bright.any():
        return -1
    mean = image[:, bright].mean(axis=1)
    return int(np.argmin(((palette() - mean) ** 2).sum(axis=1)))


# ---------------------------------------------------------------- rendering

def _cue_draw(labels, bias_ratio, num_cues, rng):
    carries = rng.random(len(labels)) < bias_ratio
    random_cue = rng.integers(0, num_cues, len(labels))
    return carries, np.where(carries, np.asarray(labels) % num_cues, random_cue)


def _stamp(n, size, masks, offs):
    """Place per-sample (g, g) boolean masks onto (n, size, size) canvases at ``offs``."""
    g = masks.shape[-1]
    out = np.zeros((n, size, size), dtype=bool)
    ar = np.arange(g)
    rows = offs[:, 0, None, None] + ar[None, :, None]
    cols = offs[:, 1, None, None] + ar[None, None, :]
    out[np.arange(n)[:, None, None], rows, cols] = masks
    return out


def _stencils(labels, factor):
    classes, inv = np.unique(np.asarray(labels, dtype=np.int64), return_inverse=True)
    table = np.stack([_upscale(glyph(int(c)), factor) for c in classes]) if len(classes) else \
        np.zeros((0, 7 * factor, 7 * factor), dtype=bool)
    return table[inv.reshape(-1)]


def _render_color(cfg, labels, bias_ratio, rng):
    n, size = len(labels), cfg.image_size
    factor = max(1, (size - 2) // 7)
    gsize = 7 * factor
    carries, cue = _cue_draw(labels, bias_ratio, cfg.cue_count, rng)
    offs = rng.integers(0, size - gsize + 1, (n, 2))
    noise = rng.normal(0.0, cfg.noise_std, (n, 3, size, size)).astype(np.float32) if cfg.noise_std else None
    fg = _stamp(n, size, _stencils(labels, factor), offs)
    images = fg[:, None].astype(np.float32) * palette()[cue][:, :, None, None]
    regions = fg & carries[:, None, None]
    if noise is not None:
        images += noise
    np.clip(images, 0.0, 1.0, out=images)
    return Split(images, np.asarray(labels, dtype=np.int64), carries, regions, cue)


def _patch_layout(size):
    factor = max(1, (size // 2) // 7)
    return 7 * factor, factor, max(4, size // 4)


def _place_patches(goffs, gsize, psize, size, rng, attempts=64):
    """First of ``attempts`` candidate patch corners clear of the glyph box (else the last)."""
    n = len(goffs)
    cand = rng.integers(0, size - psize + 1, (n, attempts, 2))
    gy, gx = goffs[:, 0, None], goffs[:, 1, None]
    py, px = cand[..., 0], cand[..., 1]
    clear = (py + psize <= gy) | (py >= gy + gsize) | (px + psize <= gx) | (px >= gx + gsize)
    pick = np.where(clear.any(axis=1), clear.argmax(axis=1), attempts - 1)
    return cand[np.arange(n), pick]


def _render_patch(cfg, labels, bias_ratio, rng, variant="full"):
    n, size = len(labels), cfg.image_size
    gsize, factor, psize = _patch_layout(size)
    carries, cue = _cue_draw(labels, bias_ratio, cfg.cue_count, rng)
    textures = np.stack([stripe_texture(c, psize) for c in range(cfg.cue_count)])
    background = (0.15 + rng.normal(0.0, max(cfg.noise_std, 0.02), (n, 1, size, size))).astype(np.float32)
    goffs = rng.integers(0, size - gsize + 1, (n, 2))
    poffs = _place_patches(goffs, gsize, psize, size, rng)
    fg = _stamp(n, size, _stencils(labels, factor), goffs)
    patch = _stamp(n, size, np.ones((n, psize, psize), dtype=bool), poffs)

    images = np.repeat(background, 3, axis=1)
    ar = np.arange(psize)
    rows = poffs[:, 0, None, None] + ar[None, :, None]
    cols = poffs[:, 1, None, None] + ar[None, None, :]
    tex = textures[cue]  # (n, 3, psize, psize)
    for ch in range(3):
        images[np.arange(n)[:, None, None], ch, rows, cols] = tex[:, ch]
    images = np.where(fg[:, None], np.float32(1.0), images)
    if variant == "only_fg":
        images = np.where(fg[:, None], images, np.float32(0.0))
    elif variant == "only_bg":
        images = np.where(fg[:, None], np.float32(0.0), images)
    images = np.ascontiguousarray(images, dtype=np.float32)
    regions = patch & carries[:, None, None]
    if variant == "only_fg":
        regions[:] = False
        carries = np.zeros(n, dtype=bool)
    np.clip(images, 0.0, 1.0, out=images)
    return Split(images, np.asarray(labels, dtype=np.int64), carries, regions, cue)


def _labels(classes, per_class, rng, shuffle):
    labels = np.repeat(np.asarray(classes, dtype=np.int64), per_class)
    return rng.permutation(labels) if shuffle else labels


def generate(cfg: StreamConfig) -> TaskStream:
    """Build every task's shuffled training stream and its test splits."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    tasks = []
    for t in range(cfg.num_tasks):
        classes = list(range(t * cfg.classes_per_task, (t + 1) * cfg.classes_per_task))
        train_labels = _labels(classes, cfg.samples_per_class, rng, shuffle=True)
        test_labels = _labels(classes, cfg.test_samples_per_class, rng, shuffle=False)
        if cfg.generator == "color_shortcut":
            train = _render_color(cfg, train_labels, cfg.bias_ratio, rng)
            tests = {
                "biased": _render_color(cfg, test_labels, 1.0, rng),
                "unbiased": _render_color(cfg, test_labels, 0.0, rng),
            }
        else:
            train = _render_patch(cfg, train_labels, cfg.bias_ratio, rng, cfg.variant)
            tests = {
                "biased": _render_patch(cfg, test_labels, 1.0, rng),
                "unbiased": _render_patch(cfg, test_labels, 0.0, rng),
                "only_fg": _render_patch(cfg, test_labels, 1.0, rng, "only_fg"),
                "only_bg": _render_patch(cfg, test_labels, 1.0, rng, "only_bg"),
            }
        tasks.append(Task(t, classes, train, tests))
    return TaskStream(cfg, tasks)


def gen_color_shortcut(cfg: StreamConfig) -> TaskStream:
    return generate(replace(cfg, generator="color_shortcut"))


def gen_patch_background(cfg: StreamConfig) -> TaskStream:
    return generate(replace(cfg, generator="patch_background"))


def novel_class_images(cfg: StreamConfig, n, seed):
    """Images of glyphs from classes outside the stream, with a uniformly random cue.

    These play the role of an unseen distribution for feature diagnostics.
    """
    rng = np.random.default_rng(seed)
    extra = np.arange(cfg.num_classes, N_HUES)
    if len(extra) == 0:
        extra = np.array([N_HUES + 7])
    labels = rng.choice(extra, size=n)
    if cfg.generator == "color_shortcut":
        split = _render_color(cfg, labels, 0.0, rng)
    else:
        split = _render_patch(cfg, labels, 0.0, rng)
    return split.images


# ---------------------------------------------------------------- dump

def dump_stream(stream: TaskStream, directory):
    """Write every split as raw little-endian float32 plus ``manifest.csv`` and ``meta.json``."""
    os.makedirs(directory, exist_ok=True)
    meta = {"config": asdict(stream.config), "files": {}}
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "task", "carries_shortcut", "split", "file", "row"])
        index = 0
        for task in stream:
            for name, split in [("train", task.train)] + list(task.tests.items()):
                fname = f"task{task.task_id}_{name}.f32"
                np.ascontiguousarray(split.images, dtype="<f4").tofile(os.path.join(directory, fname))
                meta["files"][fname] = {"shape": list(split.images.shape), "dtype": "float32-le"}
                for row in range(len(split)):
                    w.writerow([index, int(split.labels[row]), task.task_id,
                                int(bool(split.carries_shortcut[row])), name, fname, row])
                    index += 1
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
