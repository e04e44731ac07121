"""The N-domain translation model.

One encoder, decoder, and discriminator per domain. A single
`SharedLatentBlock` instance holds the last encoder stages and first decoder
stages for ALL domains: every `DomainEncoder`/`DomainDecoder` keeps a
reference to the same module, so its parameters physically exist once and
any gradient through any domain moves the one copy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from latentstack.configs import ModelConfig
from latentstack.errors import ContractError


class Translator(NamedTuple):
    """One atomic translation map: encode with `source`, decode with `target`."""

    source: int
    target: int


@dataclass
class LatentCode:
    """Encoder output: deterministic mean map and the sampled code."""

    mu: torch.Tensor
    z: torch.Tensor
    noise_enabled: bool


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class SharedLatentBlock(nn.Module):
    """The cross-domain parameter block: encoder-side and decoder-side stages."""

    def __init__(self, latent_channels: int, depth: int):
        super().__init__()
        self.encoder_stage = nn.Sequential(*[ResidualBlock(latent_channels) for _ in range(depth)])
        self.decoder_stage = nn.Sequential(*[ResidualBlock(latent_channels) for _ in range(depth)])


class DomainEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, shared: SharedLatentBlock):
        super().__init__()
        chans = [cfg.base_channels * 2 ** i for i in range(cfg.encoder_depth + 1)]
        self.stem = nn.Conv2d(cfg.channels, chans[0], 3, 1, 1)
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, 2, 1) for i in range(cfg.encoder_depth))
        self.res = nn.Sequential(*[ResidualBlock(chans[-1]) for _ in range(cfg.residual_blocks)])
        self.shared = shared  # same instance across all domains

    def forward(self, x):
        h = F.relu(self.stem(x))
        for down in self.downs:
            h = F.relu(down(h))
        return self.shared.encoder_stage(self.res(h))


class DomainDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, shared: SharedLatentBlock):
        super().__init__()
        chans = [cfg.latent_channels // 2 ** i for i in range(cfg.decoder_depth + 1)]
        self.shared = shared
        self.res = nn.Sequential(*[ResidualBlock(chans[0]) for _ in range(cfg.residual_blocks)])
        self.ups = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, 1, 1) for i in range(cfg.decoder_depth))
        self.out = nn.Conv2d(chans[-1], cfg.channels, 3, 1, 1)

    def forward(self, z):
        h = self.res(self.shared.decoder_stage(z))
        for up in self.ups:
            h = F.relu(up(F.interpolate(h, scale_factor=2, mode="nearest")))
        return torch.tanh(self.out(h))


class ScaleDiscriminator(nn.Module):
    """Patch classifier over one input scale; returns a logit map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.channels] + [cfg.base_channels * 2 ** i for i in range(cfg.discriminator_layers)]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, 2, 1) for i in range(cfg.discriminator_layers))
        self.out = nn.Conv2d(chans[-1], 1, 3, 1, 1)

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return self.out(h)


class DomainDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.scales = nn.ModuleList(ScaleDiscriminator(cfg) for _ in range(cfg.discriminator_scales))

    def forward(self, x):
        outs = []
        for k, disc in enumerate(self.scales):
            outs.append(disc(x))
            if k + 1 < len(self.scales):
                x = F.avg_pool2d(x, 2)
        return outs


def _dedupe(params: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


class NetworkSet(nn.Module):
    """Encoders E_i, decoders G_i, and discriminators D_i for all N domains."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.shared = SharedLatentBlock(cfg.latent_channels, cfg.shared_block_depth)
        self.encoders = nn.ModuleList(DomainEncoder(cfg, self.shared) for _ in range(cfg.num_domains))
        self.decoders = nn.ModuleList(DomainDecoder(cfg, self.shared) for _ in range(cfg.num_domains))
        self.discriminators = nn.ModuleList(DomainDiscriminator(cfg) for _ in range(cfg.num_domains))

    @property
    def num_domains(self) -> int:
        return self.cfg.num_domains

    def _check_domain(self, d: int) -> None:
        if not 0 <= d < self.cfg.num_domains:
            raise ContractError(f"domain id {d} out of range [0, {self.cfg.num_domains})")

    def _check_image(self, x: torch.Tensor) -> None:
        s = self.cfg.image_size
        if x.dim() != 4 or x.shape[1] != self.cfg.channels or x.shape[2] != s or x.shape[3] != s:
            raise ContractError(
                f"expected image batch (B, {self.cfg.channels}, {s}, {s}), got {tuple(x.shape)}")

    def encode(self, d: int, x: torch.Tensor, noise_enabled: bool = False,
               generator: torch.Generator | None = None) -> LatentCode:
        """Map a domain-d image batch to the shared latent space.

        `mu` is deterministic in `x`; with noise enabled, ``z = mu + eps`` with
        ``eps ~ Normal(0, noise_std^2 I)`` drawn from `generator`.
        """
        self._check_domain(d)
        self._check_image(x)
        mu = self.encoders[d](x)
        if noise_enabled and self.cfg.noise_std > 0:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            z = mu + self.cfg.noise_std * eps
        else:
            z = mu
        return LatentCode(mu=mu, z=z, noise_enabled=noise_enabled)

    def decode(self, d: int, z: torch.Tensor) -> torch.Tensor:
        """Generate a domain-d image from a latent code; output is in [-1, 1]."""
        self._check_domain(d)
        expect = (self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size)
        if z.dim() != 4 or tuple(z.shape[1:]) != expect:
            raise ContractError(f"expected latent batch (B, {expect[0]}, {expect[1]}, {expect[2]}), "
                                f"got {tuple(z.shape)}")
        return self.decoders[d](z)

    def translate(self, t: Translator | tuple[int, int], x: torch.Tensor,
                  noise_enabled: bool = False,
                  generator: torch.Generator | None = None) -> torch.Tensor:
        """Atomic translation: decode(target, encode(source, x).z), nothing else."""
        src, dst = t
        return self.decode(dst, self.encode(src, x, noise_enabled, generator).z)

    def discriminate(self, d: int, x: torch.Tensor) -> list[torch.Tensor]:
        """Realness logit maps for domain d, one per discriminator scale."""
        self._check_domain(d)
        self._check_image(x)
        return self.discriminators[d](x)

    # -- parameter partitions -------------------------------------------------

    def generator_parameters(self) -> list[torch.Tensor]:
        params: list[torch.Tensor] = []
        for m in (*self.encoders, *self.decoders):
            params.extend(m.parameters())
        return _dedupe(params)

    def discriminator_parameters(self) -> list[torch.Tensor]:
        return _dedupe(p for m in self.discriminators for p in m.parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in _dedupe(self.parameters()))

    # -- shared-storage introspection -----------------------------------------

    def shared_digest_via_encoder(self, i: int) -> str:
        self._check_domain(i)
        return module_digest(self.encoders[i].shared)

    def shared_digest_via_decoder(self, j: int) -> str:
        self._check_domain(j)
        return module_digest(self.decoders[j].shared)


def shared_block_digest(net) -> str:
    """Content hash of the shared block; equal digests iff equal parameters."""
    return net.shared_digest_via_encoder(0)


def module_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def translators(net) -> list[Translator]:
    """Every constructible (source, target) map: |N|^2 of them."""
    n = net.num_domains
    return [Translator(i, j) for i in range(n) for j in range(n)]


def init_parameters(net: NetworkSet, seed: int) -> NetworkSet:
    """Seeded fan-scaled Gaussian init for weights, zeros for biases."""
    g = torch.Generator().manual_seed(seed)
    for name, p in net.named_parameters():
        with torch.no_grad():
            if p.dim() >= 2:
                fan_in = p[0].numel()
                std = (2.0 / fan_in) ** 0.5
                init = torch.randn(p.shape, generator=g, dtype=torch.float32) * std
                p.copy_(init.to(p.dtype))
            else:
                p.zero_()
    return net


def build_networks(cfg: ModelConfig, seed: int = 0) -> NetworkSet:
    return init_parameters(NetworkSet(cfg), seed)


class IdentityNetworkSet:
    """Debug twin of `NetworkSet` whose maps are identities.

    Encoding returns the image itself as the latent mean, decoding clamps to
    [-1, 1], and every discriminator logit is 0. Useful for exercising
    metrics and chain plumbing where the exact fixed point is known.
    """

    kind = "identity"

    def __init__(self, num_domains: int = 4, image_size: int = 32, channels: int = 3,
                 noise_std: float = 1.0):
        self.num_domains = num_domains
        self.image_size = image_size
        self.channels = channels
        self.noise_std = noise_std

    def _check_domain(self, d: int) -> None:
        if not 0 <= d < self.num_domains:
            raise ContractError(f"domain id {d} out of range [0, {self.num_domains})")

    def encode(self, d, x, noise_enabled=False, generator=None) -> LatentCode:
        self._check_domain(d)
        mu = x
        if noise_enabled and self.noise_std > 0:
            z = mu + self.noise_std * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        else:
            z = mu
        return LatentCode(mu=mu, z=z, noise_enabled=noise_enabled)

    def decode(self, d, z) -> torch.Tensor:
        self._check_domain(d)
        return torch.clamp(z, -1.0, 1.0)

    def translate(self, t, x, noise_enabled=False, generator=None) -> torch.Tensor:
        src, dst = t
        return self.decode(dst, self.encode(src, x, noise_enabled, generator).z)

    def discriminate(self, d, x) -> list[torch.Tensor]:
        self._check_domain(d)
        return [torch.zeros(x.shape[0], 1, x.shape[2], x.shape[3], dtype=x.dtype)]

    def shared_digest_via_encoder(self, i: int) -> str:
        self._check_domain(i)
        return hashlib.sha256(b"identity-shared-block").hexdigest()

    def shared_digest_via_decoder(self, j: int) -> str:
        self._check_domain(j)
        return hashlib.sha256(b"identity-shared-block").hexdigest()
