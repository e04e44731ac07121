"""Composite translation chains.

A chain is an ordered list of atomic translators applied back to back, so a
two-step chain realizes the double-loop inference pattern: the output of the
first translation is re-encoded and decoded by the second. Chains of any
length are allowed; quality beyond two steps is unvalidated.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from latentstack.errors import ContractError, FormatError
from latentstack.imaging import save_image, to_uint8
from latentstack.networks import Translator

_TOKEN = re.compile(r"^\s*([^>]+?)\s*>\s*([^>]+?)\s*$")


@dataclass(frozen=True)
class ChainSpec:
    """An ordered list of translation steps; may be empty."""

    steps: tuple[Translator, ...]
    noise_enabled: bool = False
    step_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.step_names:
            object.__setattr__(self, "step_names",
                               tuple(f"{s.source}>{s.target}" for s in self.steps))
        if len(self.step_names) != len(self.steps):
            raise ContractError("step_names must parallel steps")

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class TranslationTrace:
    """Original input plus the image after every chain step, in order."""

    images: list[torch.Tensor]
    step_labels: list[str]

    def __post_init__(self) -> None:
        if len(self.images) != len(self.step_labels):
            raise ContractError("trace images and labels must have equal length")

    @property
    def final(self) -> torch.Tensor:
        return self.images[-1]

    def per_input(self) -> list["TranslationTrace"]:
        """Split a batched trace into one single-image trace per input row."""
        b = self.images[0].shape[0]
        return [TranslationTrace(images=[img[k] for img in self.images],
                                 step_labels=list(self.step_labels)) for k in range(b)]


def _resolve_domain(token: str, domain_names, position: str) -> int:
    lowered = [n.lower() for n in domain_names]
    t = token.strip().lower()
    if t in lowered:
        return lowered.index(t)
    if t.isdigit():
        idx = int(t)
        if not 1 <= idx <= len(domain_names):
            raise FormatError(f"{position}: domain index {idx} out of range 1..{len(domain_names)}")
        return idx - 1
    raise FormatError(f"{position}: unknown domain {token.strip()!r}; "
                      f"known: {', '.join(domain_names)}")


def parse_chain(text: str, domain_names, noise_enabled: bool = False) -> ChainSpec:
    """Parse `src>dst(,src>dst)*` into a ChainSpec.

    Domain names match case-insensitively; bare integers are 1-based domain
    indices. An empty string is the empty chain.
    """
    domain_names = list(domain_names)
    if not text.strip():
        return ChainSpec(steps=(), noise_enabled=noise_enabled)
    steps: list[Translator] = []
    names: list[str] = []
    for k, token in enumerate(text.split(","), start=1):
        m = _TOKEN.match(token)
        if not m:
            raise FormatError(f"chain step {k}: expected 'src>dst', got {token.strip()!r}")
        src = _resolve_domain(m.group(1), domain_names, f"chain step {k} source")
        dst = _resolve_domain(m.group(2), domain_names, f"chain step {k} target")
        steps.append(Translator(src, dst))
        names.append(f"{domain_names[src]}>{domain_names[dst]}")
    return ChainSpec(steps=tuple(steps), noise_enabled=noise_enabled, step_names=tuple(names))


def apply_chain(net, chain: ChainSpec, x: torch.Tensor,
                generator: torch.Generator | None = None) -> TranslationTrace:
    """Run the chain over a batch, recording the image after every step.

    The stored original is a verbatim copy of the input; images[k+1] is the
    translation of images[k] by steps[k] and nothing else.
    """
    if not isinstance(x, torch.Tensor) or x.dim() != 4:
        raise ContractError(f"expected a (B, C, H, W) input batch, got "
                            f"{tuple(x.shape) if isinstance(x, torch.Tensor) else type(x)}")
    images = [x.detach().clone()]
    labels = ["original"]
    current = x
    with torch.no_grad():
        for step, name in zip(chain.steps, chain.step_names):
            current = net.translate(step, current, noise_enabled=chain.noise_enabled,
                                    generator=generator)
            images.append(current.detach().clone())
            labels.append(name)
    return TranslationTrace(images=images, step_labels=labels)


def render_grid(traces: list[TranslationTrace], path: str | Path) -> Path:
    """Tile traces into a PNG: one row per input, one column per chain stage."""
    if not traces:
        raise ContractError("render_grid needs at least one trace")
    length = len(traces[0].images)
    if any(len(t.images) != length for t in traces):
        raise ContractError("all traces must have the same number of stages")
    rows = []
    for trace in traces:
        cells = []
        for img in trace.images:
            if img.dim() != 3:
                raise ContractError("render_grid expects single-image traces; "
                                    "use TranslationTrace.per_input() on batched traces")
            cells.append(to_uint8(img.numpy()))  # (H, W, C)
        rows.append(np.concatenate(cells, axis=1))
    grid = np.concatenate(rows, axis=0)  # (rows*H, cols*W, C)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="RGB").save(out, format="PNG")
    return out


def save_intermediates(trace: TranslationTrace, stem: str, out_dir: str | Path) -> list[Path]:
    """Write every stage of a single-image trace as `<stem>.step<k>.png`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, img in enumerate(trace.images):
        p = out / f"{stem}.step{k}.png"
        save_image(img.numpy(), p)
        paths.append(p)
    return paths
