"""Procedural two-attribute image corpus with machine-checkable labels.

Each sample is a filled shape on a noisy background. The two attributes are
the shape's color (red vs blue) and an overlaid horizontal stripe texture
(plain vs striped). Both are decidable from pixel statistics alone, so the
evaluator's oracle can replace human judgment.

The stripe period is a constant shared with the oracle's detection band;
changing one without the other breaks texture detection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from latentstack.errors import ContractError

COLORS = ("red", "blue")
TEXTURES = ("plain", "striped")
ALL_COMBINATIONS = tuple((c, t) for c in COLORS for t in TEXTURES)

# Rows [0, STRIPE_DUTY) of each STRIPE_PERIOD-row block are darkened. The
# oracle reads the same period, so keep them in lock step.
STRIPE_PERIOD = 8
STRIPE_DUTY = 4
STRIPE_DARKEN = 0.25  # kept fraction of brightness inside a dark stripe row

_SEED_STRIDE = 1_000_003  # per-sample seed derivation, unique for count < stride


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    color_label: str
    texture_label: str
    seed: int


def _render(rng: np.random.Generator, size: int, color: str, texture: str) -> np.ndarray:
    # background: dark gray with per-pixel noise
    img = np.full((3, size, size), -0.35, dtype=np.float64)
    img += rng.normal(0.0, 0.06, size=(3, size, size))

    # one filled shape (disk or square) at a random position and size
    radius = rng.uniform(0.22, 0.36) * size
    cy = rng.uniform(radius, size - radius)
    cx = rng.uniform(radius, size - radius)
    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    else:
        mask = (np.abs(yy - cy) <= radius * 0.85) & (np.abs(xx - cx) <= radius * 0.85)

    jitter = rng.normal(0.0, 0.04, size=3)
    if color == "red":
        fill = np.array([0.85, -0.55, -0.55]) + jitter
    else:
        fill = np.array([-0.55, -0.55, 0.85]) + jitter
    for c in range(3):
        img[c][mask] = fill[c]

    if texture == "striped":
        rows = (np.arange(size) % STRIPE_PERIOD) < STRIPE_DUTY
        # darken toward -1 in [0, 1] brightness space so hue sign is preserved
        img[:, rows, :] = (img[:, rows, :] + 1.0) * STRIPE_DARKEN - 1.0

    return np.clip(img, -1.0, 1.0).astype(np.float32)


def synth_generate(count: int, allowed_combinations: Iterable[tuple[str, str]],
                   seed: int, image_size: int = 32) -> list[SyntheticSample]:
    """Generate `count` labeled samples, a pure function of its arguments.

    Labels are drawn uniformly from `allowed_combinations`; position, size,
    shape, and background noise are randomized per sample.
    """
    if count <= 0:
        raise ContractError(f"count must be > 0, got {count}")
    combos = sorted(set(tuple(c) for c in allowed_combinations))
    if not combos:
        raise ContractError("allowed_combinations must be nonempty")
    for c in combos:
        if c not in ALL_COMBINATIONS:
            raise ContractError(f"unknown combination {c!r}; valid: {ALL_COMBINATIONS}")

    samples = []
    for i in range(count):
        sample_seed = seed * _SEED_STRIDE + i
        rng = np.random.default_rng(sample_seed)
        color, texture = combos[rng.integers(len(combos))]
        img = _render(rng, image_size, color, texture)
        samples.append(SyntheticSample(img, color, texture, sample_seed))
    return samples


def domain_combinations(excluded: tuple[str, str] | None = ("blue", "striped")) -> dict[str, list[tuple[str, str]]]:
    """Marginal membership rules for the four synthetic domains.

    Domain ``red`` holds every red image, ``striped`` every striped image, and
    so on; an image with the excluded combination appears in no domain at all.
    """
    allowed = [c for c in ALL_COMBINATIONS if c != (None if excluded is None else tuple(excluded))]
    return {
        "red": [c for c in allowed if c[0] == "red"],
        "blue": [c for c in allowed if c[0] == "blue"],
        "striped": [c for c in allowed if c[1] == "striped"],
        "plain": [c for c in allowed if c[1] == "plain"],
    }


SYNTH_DOMAIN_NAMES = ("red", "blue", "striped", "plain")
SYNTH_PAIRING = (("red", "blue"), ("striped", "plain"))


def generate_domain_images(images_per_domain: int, seed: int, image_size: int = 32,
                           excluded: tuple[str, str] | None = ("blue", "striped"),
                           ) -> dict[str, list[SyntheticSample]]:
    """Generate the four marginal domain sets, honoring the exclusion."""
    combos = domain_combinations(excluded)
    out = {}
    for k, name in enumerate(SYNTH_DOMAIN_NAMES):
        out[name] = synth_generate(images_per_domain, combos[name],
                                   seed=seed * 10 + k, image_size=image_size)
    return out


def stack_images(samples: Sequence[SyntheticSample]) -> np.ndarray:
    return np.stack([s.image for s in samples], axis=0)
