"""Quantitative evaluation: oracle labels, cycle metric, classifier gating.

Three instruments. The pixel-statistic oracle labels synthetic images by
construction, replacing human judgment at desk scale. The cycle-consistency
metric scores round-trip fidelity of a translator pair. The combination
classifier scores attribute combinations after each chain stage, excluding
images it cannot classify correctly before any translation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from latentstack.composer import ChainSpec
from latentstack.configs import ClassifierSpec, OracleConfig, as_dict
from latentstack.errors import ConfigError, ContractError, FormatError
from latentstack.networks import init_parameters
from latentstack.synthetic import STRIPE_PERIOD
from latentstack.training import derive_seed

RED = "red"
BLUE = "blue"
PLAIN = "plain"
STRIPED = "striped"
INDETERMINATE = "indeterminate"

CLASSIFIER_MANIFEST = "manifest.json"
CLASSIFIER_BLOB = "classifier.pt"


# -- synthetic attribute oracle ----------------------------------------------

def stripe_band_energy(image: np.ndarray) -> float:
    """Energy of the row-profile derivative at the stripe frequency.

    The row profile averages over channels and width; its circular forward
    difference is transformed and read out at STRIPE_PERIOD's frequency bin.
    Whole-row stripes put most of their edge energy exactly there.
    """
    h = image.shape[1]
    profile = image.mean(axis=(0, 2))
    diff = np.roll(profile, -1) - profile
    k = max(1, round(h / STRIPE_PERIOD))
    spectrum = np.fft.rfft(diff)
    if k >= len(spectrum):
        return 0.0
    return float(2.0 / h * np.abs(spectrum[k]))


def hue_balance(image: np.ndarray) -> float:
    """mean(red channel) - mean(blue channel)."""
    return float(image[0].mean() - image[2].mean())


def synthetic_oracle(image, cfg: OracleConfig | None = None) -> tuple[str, str]:
    """Label one [-1, 1] image as (color, texture), or indeterminate.

    Color compares the red/blue channel-mean difference against the margin;
    texture compares stripe-band energy against its threshold. Both checks
    are deterministic and symmetric between the two color classes.
    """
    cfg = cfg or OracleConfig()
    arr = np.asarray(image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else image,
                     dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"expected a (3, H, W) image, got shape {arr.shape}")

    m = hue_balance(arr)
    if not np.isfinite(m):
        color = INDETERMINATE
    elif m > cfg.hue_margin:
        color = RED
    elif m < -cfg.hue_margin:
        color = BLUE
    else:
        color = INDETERMINATE

    e = stripe_band_energy(arr)
    if not np.isfinite(e):
        texture = INDETERMINATE
    else:
        texture = STRIPED if e > cfg.stripe_energy else PLAIN
    return color, texture


def oracle_labels(batch, cfg: OracleConfig | None = None) -> list[tuple[str, str]]:
    return [synthetic_oracle(batch[k], cfg) for k in range(len(batch))]


# -- cycle-consistency metric -------------------------------------------------

def cycle_consistency_metric(net, pair: tuple[int, int], dataset, sample_size: int,
                             seed: int = 0) -> float:
    """Mean absolute round-trip error i -> j -> i over a fixed sample, noise off."""
    i, j = pair
    x = torch.as_tensor(np.asarray(dataset), dtype=torch.float32)
    if x.dim() != 4 or x.shape[0] == 0:
        raise ContractError("dataset must be a nonempty (n, C, H, W) array")
    if sample_size < 1:
        raise ContractError("sample_size must be >= 1")
    if x.shape[0] > sample_size:
        g = torch.Generator().manual_seed(derive_seed(seed, "cycle-sample", i, j))
        x = x[torch.randperm(x.shape[0], generator=g)[:sample_size]]
    with torch.no_grad():
        across = net.decode(j, net.encode(i, x, noise_enabled=False).z)
        back = net.decode(i, net.encode(j, across, noise_enabled=False).z)
        return float((x - back).abs().mean())


# -- combination classifier ---------------------------------------------------

class TinyCombinationClassifier(nn.Module):
    """Three strided conv stages and a linear head; enough for 32 px classes."""

    def __init__(self, num_classes: int, channels: int = 3):
        super().__init__()
        widths = [channels, 16, 32, 64]
        self.features = nn.Sequential(*[
            layer for k in range(3)
            for layer in (nn.Conv2d(widths[k], widths[k + 1], 3, 2, 1), nn.ReLU())])
        self.head = nn.Linear(widths[-1], num_classes)

    def forward(self, x):
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3)))


_VGG11_PLAN = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")


class Vgg11Classifier(nn.Module):
    """Eight conv layers in the classic 11-layer arrangement, compact head.

    The fully-connected head is narrowed to 512 units since inputs here are
    far below the resolution the original stack was sized for.
    """

    def __init__(self, num_classes: int, channels: int = 3):
        super().__init__()
        layers: list[nn.Module] = []
        width = channels
        for item in _VGG11_PLAN:
            if item == "M":
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            else:
                layers += [nn.Conv2d(width, int(item), 3, 1, 1), nn.ReLU()]
                width = int(item)
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Sequential(
            nn.Linear(512, 512), nn.ReLU(),
            nn.Linear(512, 512), nn.ReLU(),
            nn.Linear(512, num_classes))

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return self.classifier(h)


def _build_classifier(architecture: str, num_classes: int, channels: int) -> nn.Module:
    if architecture == "tiny":
        return TinyCombinationClassifier(num_classes, channels)
    if architecture == "vgg11":
        return Vgg11Classifier(num_classes, channels)
    raise ConfigError(f"unknown classifier architecture {architecture!r}")


@dataclass
class ClassifierHandle:
    model: nn.Module
    label_map: dict[int, str]
    manifest: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    def predict(self, batch: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model(batch).argmax(dim=1)


@dataclass
class ClassifierResult:
    out_dir: Path
    holdout_accuracy: float
    label_map: dict[int, str]
    handle: ClassifierHandle


def train_classifier(datasets: Mapping[str, object], spec: ClassifierSpec,
                     out_dir: str | Path) -> ClassifierResult:
    """Fit the combination classifier and persist it with its held-out accuracy.

    `datasets` maps class name to an (n, C, H, W) image array; class indices
    follow the mapping order. Every class must clear the configured minimum
    example count.
    """
    names = list(datasets.keys())
    if len(names) != spec.num_classes:
        raise ConfigError(f"expected {spec.num_classes} classes, got {len(names)}: {names}")
    arrays = {n: torch.as_tensor(np.asarray(datasets[n]), dtype=torch.float32) for n in names}
    for n, arr in arrays.items():
        if arr.dim() != 4 or arr.shape[0] < spec.min_examples_per_class:
            raise ConfigError(f"class {n!r} has {0 if arr.dim() != 4 else arr.shape[0]} examples; "
                              f"need >= {spec.min_examples_per_class}")
    channels = int(next(iter(arrays.values())).shape[1])

    train_x, train_y, hold_x, hold_y = [], [], [], []
    for idx, n in enumerate(names):
        arr = arrays[n]
        g = torch.Generator().manual_seed(derive_seed(spec.seed, "classifier-split", idx))
        perm = torch.randperm(arr.shape[0], generator=g)
        n_hold = max(1, int(round(arr.shape[0] * (1.0 - spec.train_fraction))))
        hold_x.append(arr[perm[:n_hold]])
        hold_y.append(torch.full((n_hold,), idx, dtype=torch.long))
        train_x.append(arr[perm[n_hold:]])
        train_y.append(torch.full((arr.shape[0] - n_hold,), idx, dtype=torch.long))
    x = torch.cat(train_x)
    y = torch.cat(train_y)

    model = _build_classifier(spec.architecture, spec.num_classes, channels)
    init_parameters(model, derive_seed(spec.seed, "classifier-init"))
    opt = torch.optim.Adam(model.parameters(), lr=spec.learning_rate)
    sampler = torch.Generator().manual_seed(derive_seed(spec.seed, "classifier-sampler"))
    model.train()
    for _ in range(spec.steps):
        idx = torch.randint(0, x.shape[0], (spec.batch_size,), generator=sampler)
        opt.zero_grad()
        loss = nn.functional.cross_entropy(model(x[idx]), y[idx])
        loss.backward()
        opt.step()
    model.eval()

    hx = torch.cat(hold_x)
    hy = torch.cat(hold_y)
    with torch.no_grad():
        accuracy = float((model(hx).argmax(dim=1) == hy).float().mean())

    label_map = {i: n for i, n in enumerate(names)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / CLASSIFIER_BLOB)
    manifest = {
        "kind": "classifier",
        "schema_version": 1,
        "architecture": spec.architecture,
        "num_classes": spec.num_classes,
        "channels": channels,
        "label_map": names,
        "holdout_accuracy": accuracy,
        "spec": as_dict(spec),
    }
    tmp = out / (CLASSIFIER_MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(out / CLASSIFIER_MANIFEST)
    handle = ClassifierHandle(model=model, label_map=label_map, manifest=manifest)
    return ClassifierResult(out_dir=out, holdout_accuracy=accuracy,
                            label_map=label_map, handle=handle)


def load_classifier(dirpath: str | Path) -> ClassifierHandle:
    root = Path(dirpath)
    mpath = root / CLASSIFIER_MANIFEST
    if not mpath.exists():
        raise FormatError(f"no {CLASSIFIER_MANIFEST} in {dirpath}; not a classifier checkpoint")
    manifest = json.loads(mpath.read_text())
    if manifest.get("kind") != "classifier":
        raise FormatError(f"{dirpath} is not a classifier checkpoint")
    model = _build_classifier(manifest["architecture"], int(manifest["num_classes"]),
                              int(manifest.get("channels", 3)))
    model.load_state_dict(torch.load(root / CLASSIFIER_BLOB, map_location="cpu",
                                     weights_only=True))
    model.eval()
    label_map = {i: n for i, n in enumerate(manifest["label_map"])}
    return ClassifierHandle(model=model, label_map=label_map, manifest=manifest)


# -- per-stage transition report ----------------------------------------------

@dataclass
class TransitionReport:
    """Classifier verdicts after every chain stage, over a gated batch.

    Stage 0 classifies the originals; images the classifier gets wrong are
    excluded from all stages. Each later stage classifies the translated
    batch, so every histogram sums to the gated batch size.
    """

    label_map: dict[int, str]
    batch_size: int
    gated_out: int
    kept: int
    expected: list[int]
    stage_labels: list[str]
    stage_counts: list[list[int]]
    hit_rates: list[float | None]
    flagged_empty: bool

    def to_json(self) -> dict:
        return {
            "label_map": {str(i): n for i, n in sorted(self.label_map.items())},
            "batch_size": self.batch_size,
            "gated_out": self.gated_out,
            "kept": self.kept,
            "expected": self.expected,
            "stage_labels": self.stage_labels,
            "stage_counts": self.stage_counts,
            "hit_rates": self.hit_rates,
            "flagged_empty": self.flagged_empty,
        }

    def format_table(self) -> str:
        lines = [f"classes: " + ", ".join(f"{i}: {n}" for i, n in sorted(self.label_map.items())),
                 f"batch {self.batch_size}, gated out {self.gated_out}, kept {self.kept}"]
        if self.flagged_empty:
            lines.append("no image survived gating; stages are empty")
        header = f"{'stage':<24}{'expected':<20}{'hit-rate':<10}counts"
        lines.append(header)
        for k, label in enumerate(self.stage_labels):
            name = self.label_map[self.expected[k]]
            rate = "-" if self.hit_rates[k] is None else f"{self.hit_rates[k]:.3f}"
            counts = " ".join(str(c) for c in self.stage_counts[k])
            lines.append(f"{label:<24}{name:<20}{rate:<10}{counts}")
        return "\n".join(lines)


def _resolve_class(value, label_map: dict[int, str]) -> int:
    if isinstance(value, str):
        for idx, name in label_map.items():
            if name.lower() == value.lower():
                return idx
        raise ContractError(f"unknown class name {value!r}; known: {sorted(label_map.values())}")
    idx = int(value)
    if idx not in label_map:
        raise ContractError(f"class index {idx} not in label map")
    return idx


def presence_metric(net, classifier: ClassifierHandle, source_batch, chain: ChainSpec,
                    expected_classes: Sequence) -> TransitionReport:
    """Classify a single-class batch after every chain stage, with gating.

    `expected_classes` names the class (index or name) the batch should be
    in at stage 0 and after each step; its length is chain length + 1.
    Originals the classifier misses at stage 0 are excluded everywhere.
    """
    x = torch.as_tensor(np.asarray(source_batch), dtype=torch.float32)
    if x.dim() != 4 or x.shape[0] == 0:
        raise ContractError("source_batch must be a nonempty (n, C, H, W) array")
    expected = [_resolve_class(v, classifier.label_map) for v in expected_classes]
    if len(expected) != len(chain) + 1:
        raise ContractError(f"expected_classes must have {len(chain) + 1} entries "
                            f"(chain length + 1), got {len(expected)}")

    n_classes = classifier.num_classes
    batch_size = int(x.shape[0])
    preds0 = classifier.predict(x)
    mask = preds0 == expected[0]
    kept = int(mask.sum())
    gated_out = batch_size - kept
    stage_labels = ["original"] + list(chain.step_names)

    def histogram(preds: torch.Tensor) -> list[int]:
        return torch.bincount(preds, minlength=n_classes).tolist()

    if kept == 0:
        zeros = [0] * n_classes
        return TransitionReport(
            label_map=dict(classifier.label_map), batch_size=batch_size,
            gated_out=gated_out, kept=0, expected=expected, stage_labels=stage_labels,
            stage_counts=[list(zeros) for _ in stage_labels],
            hit_rates=[None] * len(stage_labels), flagged_empty=True)

    current = x[mask]
    stage_counts = [histogram(preds0[mask])]
    hit_rates: list[float | None] = [1.0]
    with torch.no_grad():
        for k, step in enumerate(chain.steps):
            current = net.translate(step, current, noise_enabled=chain.noise_enabled)
            preds = classifier.predict(current)
            stage_counts.append(histogram(preds))
            hit_rates.append(float((preds == expected[k + 1]).float().mean()))
    return TransitionReport(
        label_map=dict(classifier.label_map), batch_size=batch_size, gated_out=gated_out,
        kept=kept, expected=expected, stage_labels=stage_labels,
        stage_counts=stage_counts, hit_rates=hit_rates, flagged_empty=False)
