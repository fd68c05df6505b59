"""Small shared helpers: deterministic seed derivation and RGB-to-gray."""

import hashlib

import numpy as np


def derived_seed(seed, *parts):
    """Derive a child seed from a base seed and a label path.

    Stable across platforms and processes (unlike ``hash``), so work that
    is split per tree / per fold gives schedule-independent results.
    """
    text = ":".join([str(int(seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rgb_to_gray(image):
    """Convert an (h, w, 3) uint8 image to (h, w) uint8 using BT.601 luma."""
    if image.ndim == 2:
        return image
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (h, w) or (h, w, 3) image, got {image.shape}")
    luma = (0.299 * image[:, :, 0] + 0.587 * image[:, :, 1]
            + 0.114 * image[:, :, 2])
    return np.rint(luma).clip(0, 255).astype(np.uint8)
