"""Synthetic fundus-like corpora for tests.

Every class gets a bright disc at its own position on a shaded reddish
background, with per-image jitter and pixel noise.
"""

from pathlib import Path

import numpy as np
from PIL import Image

CLASS_NAMES = ("cataract", "diabetic_retinopathy", "glaucoma", "normal")
_CENTERS = ((0.3, 0.3), (0.7, 0.3), (0.3, 0.7), (0.7, 0.7), (0.5, 0.5))


def toy_image(label, side, rng):
    yy, xx = np.mgrid[0:side, 0:side] / side
    cx, cy = _CENTERS[label % len(_CENTERS)]
    cx += rng.normal(0, 0.03)
    cy += rng.normal(0, 0.03)
    disc = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.01)
    shade = 1 - 0.3 * ((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
    img = np.array([0.48, 0.24, 0.16]) * shade[..., None] + 0.4 * disc[..., None]
    img = img + rng.normal(0, 0.05, img.shape)
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


def make_corpus(root, per_class, side=224, class_names=CLASS_NAMES, seed=0):
    root = Path(root)
    rng = np.random.default_rng(seed)
    for label, name in enumerate(class_names):
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            Image.fromarray(toy_image(label, side, rng)).save(folder / f"{name}_{i:03d}.png")
    return root
