"""Loss terms for N-domain translation training.

Three families per trained translation: a VAE term (latent prior penalty plus
within-domain reconstruction), an adversarial term against the target-domain
discriminator, and a cycle-consistency term across a domain pair. For four
domains that makes twelve generator-side elements; the report exposes each
one separately together with the per-domain discriminator losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from latentstack.configs import LossWeights
from latentstack.errors import ContractError, NumericalError

# probabilities are clamped to [EPS, 1-EPS] inside every log
EPS = 1e-7


def _finite(component: str, value: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        raise NumericalError(component)
    return value


def _check_batch(name: str, batch: torch.Tensor) -> None:
    if not isinstance(batch, torch.Tensor) or batch.dim() != 4 or batch.shape[0] == 0:
        raise ContractError(f"{name} must be a nonempty (B, C, H, W) tensor")


def latent_prior_penalty(mu: torch.Tensor) -> torch.Tensor:
    """KL(Normal(mu, I) || Normal(0, I)) averaged over the batch: mean ||mu||^2 / 2."""
    return mu.pow(2).flatten(1).sum(dim=1).div(2).mean()


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def vae_loss(net, d: int, batch: torch.Tensor, weights: LossWeights,
             noise_enabled: bool = False,
             generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Unweighted prior penalty and within-domain reconstruction error.

    Returns (kl, recon) where recon is the mean absolute difference between
    the batch and its own-domain reconstruction through the sampled code.
    """
    _check_batch("batch", batch)
    code = net.encode(d, batch, noise_enabled=noise_enabled, generator=generator)
    recon = net.decode(d, code.z)
    kl = _finite(f"vae_kl[{d}]", latent_prior_penalty(code.mu))
    rec = _finite(f"vae_recon[{d}]", _l1(batch, recon))
    return kl, rec


def gan_loss(net, d: int, real_batch: torch.Tensor,
             fake_batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Binary cross-entropy adversarial losses for domain d, averaged over scales.

    d_loss sees the fake batch detached, g_loss sees it live, so the fake
    gradient reaches the discriminator only through d_loss and the generator
    only through g_loss.
    """
    _check_batch("real_batch", real_batch)
    _check_batch("fake_batch", fake_batch)
    real_logits = net.discriminate(d, real_batch)
    fake_logits_d = net.discriminate(d, fake_batch.detach())
    fake_logits_g = net.discriminate(d, fake_batch)

    d_terms, g_terms = [], []
    for real, fake_d, fake_g in zip(real_logits, fake_logits_d, fake_logits_g):
        p_real = torch.sigmoid(real).clamp(EPS, 1.0 - EPS)
        p_fake_d = torch.sigmoid(fake_d).clamp(EPS, 1.0 - EPS)
        p_fake_g = torch.sigmoid(fake_g).clamp(EPS, 1.0 - EPS)
        d_terms.append(-p_real.log().mean() - (1.0 - p_fake_d).log().mean())
        g_terms.append(-p_fake_g.log().mean())
    d_loss = _finite(f"gan_d[{d}]", torch.stack(d_terms).mean())
    g_loss = _finite(f"gan_g[{d}]", torch.stack(g_terms).mean())
    return d_loss, g_loss


def cycle_loss(net, i: int, j: int, batch: torch.Tensor, weights: LossWeights,
               noise_enabled: bool = False,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """Weighted round-trip error for i -> j -> i plus both intermediate priors."""
    _check_batch("batch", batch)
    code_fwd = net.encode(i, batch, noise_enabled=noise_enabled, generator=generator)
    across = net.decode(j, code_fwd.z)
    code_back = net.encode(j, across, noise_enabled=noise_enabled, generator=generator)
    back = net.decode(i, code_back.z)
    kl_both = latent_prior_penalty(code_fwd.mu) + latent_prior_penalty(code_back.mu)
    value = weights.w_cc_recon * _l1(batch, back) + weights.w_cc_kl * kl_both
    return _finite(f"cc[{i}]", value)


def default_pairing(num_domains: int) -> tuple[tuple[int, int], ...]:
    return tuple((d, d + 1) for d in range(0, num_domains, 2))


def _pair_partners(pairing) -> dict[int, int]:
    partners: dict[int, int] = {}
    for i, j in pairing:
        if i == j or i in partners or j in partners:
            raise ContractError(f"pairing {tuple(pairing)} must cover each domain exactly once")
        partners[i] = j
        partners[j] = i
    return partners


@dataclass
class ObjectiveTerms:
    """Per-domain loss tensors with their graphs attached.

    Used by the trainer to take gradients; `report()` collapses everything to
    the float-valued record that gets logged.
    """

    domains: tuple[int, ...]
    pairing: tuple[tuple[int, int], ...]
    weights: LossWeights
    vae_kl: dict[int, torch.Tensor] = field(default_factory=dict)
    vae_recon: dict[int, torch.Tensor] = field(default_factory=dict)
    gan_g: dict[int, torch.Tensor] = field(default_factory=dict)
    gan_d: dict[int, torch.Tensor] = field(default_factory=dict)
    cc: dict[int, torch.Tensor] = field(default_factory=dict)

    def generator_total_tensor(self) -> torch.Tensor:
        w = self.weights
        terms = []
        for d in self.domains:
            terms.append(w.w_kl * self.vae_kl[d] + w.w_recon * self.vae_recon[d])
            terms.append(w.w_gan * self.gan_g[d])
            terms.append(self.cc[d])
        return torch.stack(terms).sum()

    def discriminator_total_tensor(self) -> torch.Tensor:
        return torch.stack([self.gan_d[d] for d in self.domains]).sum()

    def report(self) -> "LossReport":
        return LossReport(
            domains=self.domains,
            pairing=self.pairing,
            weights=self.weights,
            vae_kl={d: float(v.detach()) for d, v in self.vae_kl.items()},
            vae_recon={d: float(v.detach()) for d, v in self.vae_recon.items()},
            gan_g={d: float(v.detach()) for d, v in self.gan_g.items()},
            gan_d={d: float(v.detach()) for d, v in self.gan_d.items()},
            cc={d: float(v.detach()) for d, v in self.cc.items()},
        )


@dataclass(frozen=True)
class LossReport:
    """Float-valued snapshot of every loss component at one training step.

    The generator side decomposes into exactly three named elements per
    active domain (vae, gan, cc); `generator_total` is their plain sum, so
    the decomposition is exact with no hidden terms.
    """

    domains: tuple[int, ...]
    pairing: tuple[tuple[int, int], ...]
    weights: LossWeights
    vae_kl: dict[int, float]
    vae_recon: dict[int, float]
    gan_g: dict[int, float]
    gan_d: dict[int, float]
    cc: dict[int, float]

    def generator_elements(self) -> dict[str, float]:
        """The weighted generator-side elements, three per domain."""
        w = self.weights
        out: dict[str, float] = {}
        for d in self.domains:
            out[f"vae_{d}"] = w.w_kl * self.vae_kl[d] + w.w_recon * self.vae_recon[d]
            out[f"gan_{d}"] = w.w_gan * self.gan_g[d]
            out[f"cc_{d}"] = self.cc[d]
        return out

    @property
    def generator_total(self) -> float:
        return sum(self.generator_elements().values())

    @property
    def discriminator_total(self) -> float:
        return sum(self.gan_d[d] for d in self.domains)

    def all_values(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for d in self.domains:
            out[f"vae_kl_{d}"] = self.vae_kl[d]
            out[f"vae_recon_{d}"] = self.vae_recon[d]
            out[f"gan_g_{d}"] = self.gan_g[d]
            out[f"gan_d_{d}"] = self.gan_d[d]
            out[f"cc_{d}"] = self.cc[d]
        out.update(self.generator_elements())
        out["generator_total"] = self.generator_total
        out["discriminator_total"] = self.discriminator_total
        return out

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.all_values().values())

    def max_magnitude(self) -> float:
        return max(abs(v) for v in self.all_values().values())

    def to_record(self, step: int, wall_time: float | None = None) -> dict:
        record: dict = {"step": step}
        record.update(self.all_values())
        if wall_time is not None:
            record["wall_time"] = wall_time
        return record


def objective_terms(net, batches: Mapping[int, torch.Tensor], weights: LossWeights,
                    pairing=None, noise_enabled: bool = False,
                    generator: torch.Generator | None = None) -> ObjectiveTerms:
    """All loss tensors for one step over the domains covered by `pairing`.

    Adversarial fakes for domain d are translations from d's pair partner,
    matching the per-pair translation structure; cycle terms run i -> j -> i
    within each pair. Domains are processed in ascending order so that noise
    draws from `generator` are reproducible.
    """
    if pairing is None:
        pairing = default_pairing(net.num_domains)
    pairing = tuple(tuple(p) for p in pairing)
    partners = _pair_partners(pairing)
    domains = tuple(sorted(partners))
    for d in domains:
        if d not in batches:
            raise ContractError(f"missing batch for domain {d}")
        _check_batch(f"batches[{d}]", batches[d])

    terms = ObjectiveTerms(domains=domains, pairing=pairing, weights=weights)
    for d in domains:
        kl, rec = vae_loss(net, d, batches[d], weights,
                           noise_enabled=noise_enabled, generator=generator)
        terms.vae_kl[d] = kl
        terms.vae_recon[d] = rec
    for d in domains:
        src = partners[d]
        fake = net.translate((src, d), batches[src],
                             noise_enabled=noise_enabled, generator=generator)
        d_loss, g_loss = gan_loss(net, d, batches[d], fake)
        terms.gan_d[d] = d_loss
        terms.gan_g[d] = g_loss
    for d in domains:
        terms.cc[d] = cycle_loss(net, d, partners[d], batches[d], weights,
                                 noise_enabled=noise_enabled, generator=generator)
    return terms


def total_objective(net, batches: Mapping[int, torch.Tensor], weights: LossWeights,
                    pairing=None, noise_enabled: bool = False,
                    generator: torch.Generator | None = None) -> LossReport:
    """One full objective evaluation collapsed to its reportable components."""
    return objective_terms(net, batches, weights, pairing=pairing,
                           noise_enabled=noise_enabled, generator=generator).report()
