"""Image preprocessing and dataset directory I/O.

Images travel through the package as (C, H, W) float arrays in [-1, 1];
files on disk are ordinary 8-bit PNGs under ``<root>/<domain>/``. Synthetic
datasets carry a sidecar ``labels.txt`` with one
``<image-id> <color> <texture> <seed>`` line per image.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from latentstack.errors import ContractError, FormatError, IngestionError
from latentstack.synthetic import SyntheticSample

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.txt"


def preprocess(raw: np.ndarray, target_size: int) -> np.ndarray:
    """Center-crop to square, resize, and map [0, 255] to [-1, 1].

    `raw` is an 8-bit (H, W) or (H, W, C) array with 1 or 3 channels; the
    result is (C, target_size, target_size) float32.
    """
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.ndim != 3 or raw.shape[2] not in (1, 3):
        raise ContractError(f"expected (H, W) or (H, W, 1|3) input, got shape {raw.shape}")
    if raw.shape[0] < 1 or raw.shape[1] < 1:
        raise ContractError("input image has no pixels")
    h, w, c = raw.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    cropped = raw[top:top + side, left:left + side, :]
    if c == 1:
        cropped = np.repeat(cropped, 3, axis=2)
    pil = Image.fromarray(cropped.astype(np.uint8))
    resized = np.asarray(pil.resize((target_size, target_size), Image.BILINEAR), dtype=np.float32)
    chw = np.transpose(resized, (2, 0, 1))
    return chw / 127.5 - 1.0


def load_image(path: str | Path, target_size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"cannot read image {path}: {e}") from e
    return preprocess(arr, target_size)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map a (C, H, W) [-1, 1] tensor back to an (H, W, C) 8-bit array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractError(f"expected (C, H, W), got shape {arr.shape}")
    hwc = np.transpose(arr, (1, 2, 0))
    return np.clip(np.rint((hwc + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def write_synthetic_dataset(root: str | Path, domains: dict[str, list[SyntheticSample]],
                            pairing: Sequence[tuple[str, str]], seed: int,
                            image_size: int, excluded: tuple[str, str] | None) -> dict:
    """Write a domain-layout synthetic dataset plus labels and manifest."""
    rootp = Path(root)
    rootp.mkdir(parents=True, exist_ok=True)
    label_lines = []
    counts = {}
    hasher = hashlib.sha256()
    for name in domains:
        ddir = rootp / name
        ddir.mkdir(exist_ok=True)
        for i, s in enumerate(domains[name]):
            image_id = f"{name}_{i:05d}"
            save_image(s.image, ddir / f"{image_id}.png")
            label_lines.append(f"{image_id} {s.color_label} {s.texture_label} {s.seed}")
            hasher.update(image_id.encode())
            hasher.update(s.image.tobytes())
        counts[name] = len(domains[name])
    (rootp / LABELS_NAME).write_text("\n".join(label_lines) + "\n")
    manifest = {
        "kind": "synthetic",
        "domain_names": list(domains),
        "pairing": [list(p) for p in pairing],
        "counts": counts,
        "image_size": image_size,
        "seed": seed,
        "excluded_combination": list(excluded) if excluded else None,
        "content_hash": hasher.hexdigest(),
    }
    write_manifest(rootp, manifest)
    return manifest


def write_manifest(root: str | Path, manifest: dict) -> None:
    # atomic: a manifest either exists complete or not at all
    target = Path(root) / MANIFEST_NAME
    tmp = target.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(target)


def read_manifest(root: str | Path) -> dict:
    p = Path(root) / MANIFEST_NAME
    if not p.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {root}; not a dataset directory")
    return json.loads(p.read_text())


def read_labels(root: str | Path) -> dict[str, tuple[str, str, int]]:
    """Parse the sidecar label file into id -> (color, texture, seed)."""
    p = Path(root) / LABELS_NAME
    if not p.exists():
        raise FormatError(f"no {LABELS_NAME} in {root}")
    out = {}
    for lineno, ln in enumerate(p.read_text().splitlines(), start=1):
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 4:
            raise FormatError(f"{p}: line {lineno}: expected 4 fields, got {len(parts)}")
        out[parts[0]] = (parts[1], parts[2], int(parts[3]))
    return out


def load_domain_images(root: str | Path, target_size: int | None = None) -> dict[str, np.ndarray]:
    """Load every domain directory into (n, 3, S, S) float32 arrays."""
    rootp = Path(root)
    manifest = read_manifest(rootp)
    size = target_size or manifest["image_size"]
    out = {}
    for name in manifest["domain_names"]:
        files = sorted((rootp / name).glob("*.png"))
        if not files:
            raise IngestionError(f"domain directory {rootp / name} has no images")
        out[name] = np.stack([load_image(f, size) for f in files], axis=0)
    return out
