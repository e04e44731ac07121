"""Checkpoint bundles for a NetworkSet.

A bundle is a directory with one parameter blob per network, the shared
block stored exactly once, and a manifest describing the model config,
domain names, training regime, and step count. The manifest is written
last and atomically, so a readable manifest implies a complete bundle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch

from latentstack.configs import ModelConfig, config_hash
from latentstack.errors import FormatError
from latentstack.networks import NetworkSet

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
TRAIN_STATE_NAME = "train_state.pt"
_SHARED_PREFIX = "shared."


@dataclass
class CheckpointManifest:
    model: dict
    domain_names: tuple[str, ...]
    regime: str
    step: int
    config_hash: str
    weights: dict
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_mapping(self.model)


def _blob_names(num_domains: int) -> list[str]:
    names = ["shared.pt"]
    for d in range(num_domains):
        names += [f"encoder_{d}.pt", f"decoder_{d}.pt", f"discriminator_{d}.pt"]
    return names


def _private_state(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    # everything except the jointly-owned shared block, which is stored once
    return {k: v for k, v in module.state_dict().items() if not k.startswith(_SHARED_PREFIX)}


def save_checkpoint(dirpath: str | Path, net: NetworkSet, *, domain_names, regime: str,
                    step: int, weights: dict | None = None,
                    extra: dict | None = None) -> Path:
    """Write a complete bundle; returns the bundle directory."""
    out = Path(dirpath)
    out.mkdir(parents=True, exist_ok=True)
    cfg = net.cfg
    if len(tuple(domain_names)) != cfg.num_domains:
        raise FormatError(f"expected {cfg.num_domains} domain names, got {tuple(domain_names)}")

    torch.save(net.shared.state_dict(), out / "shared.pt")
    for d in range(cfg.num_domains):
        torch.save(_private_state(net.encoders[d]), out / f"encoder_{d}.pt")
        torch.save(_private_state(net.decoders[d]), out / f"decoder_{d}.pt")
        torch.save(net.discriminators[d].state_dict(), out / f"discriminator_{d}.pt")

    manifest = CheckpointManifest(
        model=cfg.as_dict(),
        domain_names=tuple(domain_names),
        regime=regime,
        step=step,
        config_hash=config_hash(cfg),
        weights=dict(weights or {}),
        extra=dict(extra or {}),
    )
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    tmp.replace(out / MANIFEST_NAME)
    return out


def load_manifest(dirpath: str | Path) -> CheckpointManifest:
    p = Path(dirpath) / MANIFEST_NAME
    if not p.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {dirpath}; not a checkpoint bundle")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{p}: invalid JSON: {e}") from e
    if not isinstance(raw, dict) or raw.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{p}: unsupported checkpoint schema {raw.get('schema_version')!r}")
    try:
        return CheckpointManifest(
            model=dict(raw["model"]),
            domain_names=tuple(raw["domain_names"]),
            regime=str(raw["regime"]),
            step=int(raw["step"]),
            config_hash=str(raw["config_hash"]),
            weights=dict(raw.get("weights", {})),
            extra=dict(raw.get("extra", {})),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{p}: malformed manifest: {e}") from e


def _config_mismatch_fields(expected: dict, found: dict) -> list[str]:
    keys = sorted(set(expected) | set(found))
    return [k for k in keys if expected.get(k) != found.get(k)]


def _load_blob(path: Path) -> dict[str, torch.Tensor]:
    if not path.exists():
        raise FormatError(f"checkpoint bundle missing blob {path.name}")
    return torch.load(path, map_location="cpu", weights_only=True)


def _load_with_shared(module: torch.nn.Module, state: dict, blob: str) -> None:
    missing, unexpected = module.load_state_dict(state, strict=False)
    if unexpected or any(not k.startswith(_SHARED_PREFIX) for k in missing):
        raise FormatError(f"blob {blob} does not match the configured architecture: "
                          f"missing={missing} unexpected={unexpected}")


def load_checkpoint(dirpath: str | Path,
                    expected: ModelConfig | None = None) -> tuple[NetworkSet, CheckpointManifest]:
    """Rebuild the NetworkSet from a bundle, failing loudly on config mismatch."""
    root = Path(dirpath)
    manifest = load_manifest(root)
    cfg = manifest.model_config()
    if expected is not None and expected.as_dict() != cfg.as_dict():
        fields = _config_mismatch_fields(expected.as_dict(), cfg.as_dict())
        raise FormatError(f"checkpoint config mismatch on field(s): {', '.join(fields)}")
    if config_hash(cfg) != manifest.config_hash:
        raise FormatError("checkpoint manifest config_hash does not match its model section")

    net = NetworkSet(cfg)
    try:
        net.shared.load_state_dict(_load_blob(root / "shared.pt"))
        for d in range(cfg.num_domains):
            _load_with_shared(net.encoders[d], _load_blob(root / f"encoder_{d}.pt"),
                              f"encoder_{d}.pt")
            _load_with_shared(net.decoders[d], _load_blob(root / f"decoder_{d}.pt"),
                              f"decoder_{d}.pt")
            net.discriminators[d].load_state_dict(_load_blob(root / f"discriminator_{d}.pt"))
    except RuntimeError as e:
        raise FormatError(f"checkpoint bundle {root} does not fit its declared config: {e}") from e
    net.eval()
    return net, manifest


def checkpoint_blob_bytes(dirpath: str | Path) -> dict[str, bytes]:
    """Raw bytes of every parameter blob, for byte-identity comparisons."""
    root = Path(dirpath)
    manifest = load_manifest(root)
    n = ModelConfig.from_mapping(manifest.model).num_domains
    return {name: (root / name).read_bytes() for name in _blob_names(n)}


def bundle_digest(dirpath: str | Path) -> str:
    """Content hash over every parameter blob in the bundle."""
    import hashlib

    h = hashlib.sha256()
    for name, blob in sorted(checkpoint_blob_bytes(dirpath).items()):
        h.update(name.encode())
        h.update(blob)
    return h.hexdigest()


def save_train_state(dirpath: str | Path, state: dict[str, Any]) -> None:
    torch.save(state, Path(dirpath) / TRAIN_STATE_NAME)


def load_train_state(dirpath: str | Path) -> dict[str, Any]:
    p = Path(dirpath) / TRAIN_STATE_NAME
    if not p.exists():
        raise FormatError(f"no {TRAIN_STATE_NAME} in {dirpath}; cannot resume")
    return torch.load(p, map_location="cpu", weights_only=True)
