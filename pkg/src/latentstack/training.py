"""Training loops for the three regimes.

All regimes share one loop. Per-pair training is the joint loop restricted
to a single domain pair, so "joint restricted to two domains" and "pair
training" are the same code path by construction. Warm starting builds a
joint model out of two per-pair checkpoints, copying domain-private
parameters verbatim and filling the single shared block per policy, then
fine-tunes with the joint loop.

Every step performs one discriminator update followed by one generator
update; both gradients are evaluated at the pre-update parameters, and the
returned report is measured there too.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import torch

from latentstack.checkpoints import (
    bundle_digest,
    load_checkpoint,
    load_train_state,
    save_checkpoint,
    save_train_state,
)
from latentstack.configs import LossWeights, ModelConfig, TrainConfig
from latentstack.errors import ContractError, DivergenceError, NumericalError, TransplantError
from latentstack.networks import NetworkSet, build_networks, _dedupe
from latentstack.objective import LossReport, default_pairing, objective_terms

TRANSPLANT_POLICIES = ("pair_one", "pair_two", "average")
METRICS_NAME = "metrics.jsonl"
FINAL_DIR = "final"


def derive_seed(seed: int, *parts) -> int:
    """Stable sub-seed for one named consumer of the run seed."""
    text = "/".join([str(seed), *(str(p) for p in parts)])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def _as_image_tensor(name: str, value, cfg: ModelConfig) -> torch.Tensor:
    t = torch.as_tensor(value, dtype=torch.float32)
    if t.dim() != 4 or tuple(t.shape[1:]) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ContractError(
            f"{name}: expected (n, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), "
            f"got {tuple(t.shape)}")
    if t.shape[0] == 0:
        raise ContractError(f"{name}: empty domain")
    return t


def active_generator_parameters(net: NetworkSet, domains: Sequence[int]) -> list[torch.Tensor]:
    params: list[torch.Tensor] = []
    for d in domains:
        params.extend(net.encoders[d].parameters())
        params.extend(net.decoders[d].parameters())
    return _dedupe(params)


def active_discriminator_parameters(net: NetworkSet, domains: Sequence[int]) -> list[torch.Tensor]:
    return _dedupe(p for d in domains for p in net.discriminators[d].parameters())


def _check_grads(component: str, grads) -> None:
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(component, "gradient")


def training_step(net: NetworkSet, batches: Mapping[int, torch.Tensor], cfg: TrainConfig,
                  step_index: int, pairing=None,
                  optimizers: tuple[torch.optim.Optimizer, torch.optim.Optimizer] | None = None,
                  generator: torch.Generator | None = None) -> LossReport:
    """One discriminator update then one generator update.

    Both gradients are taken at the parameters as they were on entry, and
    the returned report reflects those pre-update parameters.
    """
    if pairing is None:
        pairing = default_pairing(net.num_domains)
    domains = sorted({d for p in pairing for d in p})
    gen_params = active_generator_parameters(net, domains)
    disc_params = active_discriminator_parameters(net, domains)
    if optimizers is None:
        optimizers = build_optimizers(net, cfg, domains)
    opt_d, opt_g = optimizers

    terms = objective_terms(net, batches, cfg.weights, pairing=pairing,
                            noise_enabled=cfg.noise_enabled, generator=generator)
    report = terms.report()

    d_grads = torch.autograd.grad(terms.discriminator_total_tensor(), disc_params,
                                  retain_graph=True)
    g_grads = torch.autograd.grad(terms.generator_total_tensor(), gen_params)
    _check_grads("discriminator", d_grads)
    _check_grads("generator", g_grads)

    for p, g in zip(disc_params, d_grads):
        p.grad = g
    opt_d.step()
    for p, g in zip(gen_params, g_grads):
        p.grad = g
    opt_g.step()
    for p in (*disc_params, *gen_params):
        p.grad = None
    return report


def build_optimizers(net: NetworkSet, cfg: TrainConfig,
                     domains: Sequence[int]) -> tuple[torch.optim.Optimizer, torch.optim.Optimizer]:
    """(discriminator, generator) adaptive-moment optimizers over the active domains."""
    betas = (cfg.beta1, cfg.beta2)
    opt_d = torch.optim.Adam(active_discriminator_parameters(net, domains),
                             lr=cfg.learning_rate, betas=betas)
    opt_g = torch.optim.Adam(active_generator_parameters(net, domains),
                             lr=cfg.learning_rate, betas=betas)
    return opt_d, opt_g


@dataclass
class TrainResult:
    checkpoint_dir: Path
    out_dir: Path
    final_step: int
    reports: list[LossReport]
    metrics_path: Path


def _checkpoint_name(step: int) -> str:
    return f"step_{step:06d}"


def _save_state(bundle: Path, step: int, opt_d, opt_g, noise_g, samplers) -> None:
    save_train_state(bundle, {
        "next_step": step,
        "opt_d": opt_d.state_dict(),
        "opt_g": opt_g.state_dict(),
        "noise_rng": noise_g.get_state(),
        "sampler_rng": {d: g.get_state() for d, g in samplers.items()},
    })


def run_training(net: NetworkSet, data: Mapping[int, object], model_cfg: ModelConfig,
                 cfg: TrainConfig, out_dir: str | Path, pairing=None,
                 domain_names: Sequence[str] | None = None, deterministic: bool = True,
                 resume_from: str | Path | None = None,
                 manifest_extra: dict | None = None) -> TrainResult:
    """The shared training loop; regimes differ only in `pairing` and init.

    Emits a bundle at step 0, every `checkpoint_every` steps, and a `final`
    bundle; appends one JSON-lines record per step to metrics.jsonl. On a
    divergent or non-finite loss the loop aborts, keeping the last bundle.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if pairing is None:
        pairing = default_pairing(model_cfg.num_domains)
    pairing = tuple(tuple(p) for p in pairing)
    domains = sorted({d for p in pairing for d in p})
    if domain_names is None:
        domain_names = tuple(f"domain_{d}" for d in range(model_cfg.num_domains))
    domain_names = tuple(domain_names)

    tensors = {d: _as_image_tensor(f"data[{d}]", data[d], model_cfg) for d in domains}

    noise_g = torch.Generator().manual_seed(derive_seed(cfg.seed, "noise"))
    samplers = {d: torch.Generator().manual_seed(derive_seed(cfg.seed, "sampler", d))
                for d in domains}
    opt_d, opt_g = build_optimizers(net, cfg, domains)

    start_step = 0
    if resume_from is not None:
        restored, _ = load_checkpoint(resume_from, expected=model_cfg)
        net.load_state_dict(restored.state_dict())
        state = load_train_state(resume_from)
        start_step = int(state["next_step"])
        opt_d.load_state_dict(state["opt_d"])
        opt_g.load_state_dict(state["opt_g"])
        noise_g.set_state(state["noise_rng"])
        for d in domains:
            samplers[d].set_state(state["sampler_rng"][d])

    extra = dict(manifest_extra or {})
    extra.update({
        "pairing": [list(p) for p in pairing],
        "active_domains": list(domains),
        "seed": cfg.seed,
        "optimizer": {"learning_rate": cfg.learning_rate, "betas": [cfg.beta1, cfg.beta2]},
        "noise_enabled": cfg.noise_enabled,
    })
    weights_map = cfg.weights.as_dict()

    def emit(step: int) -> Path:
        bundle = save_checkpoint(out / _checkpoint_name(step), net,
                                 domain_names=domain_names, regime=cfg.regime,
                                 step=step, weights=weights_map, extra=extra)
        _save_state(bundle, step, opt_d, opt_g, noise_g, samplers)
        return bundle

    last_good = emit(start_step) if resume_from is None else Path(resume_from)
    metrics_path = out / METRICS_NAME
    reports: list[LossReport] = []
    mode = "a" if resume_from is not None else "w"

    with open(metrics_path, mode) as metrics:
        for step in range(start_step, cfg.steps):
            batches = {}
            for d in domains:
                n = tensors[d].shape[0]
                idx = torch.randint(0, n, (cfg.batch_size,), generator=samplers[d])
                batches[d] = tensors[d][idx]
            started = time.monotonic()
            try:
                report = training_step(net, batches, cfg, step, pairing=pairing,
                                       optimizers=(opt_d, opt_g), generator=noise_g)
            except NumericalError as e:
                raise DivergenceError(
                    f"aborted at step {step}: {e}; last checkpoint kept at {last_good}",
                    last_checkpoint=str(last_good)) from e
            if not report.is_finite() or report.max_magnitude() > cfg.divergence_limit:
                raise DivergenceError(
                    f"aborted at step {step}: loss magnitude {report.max_magnitude():.3g} "
                    f"exceeds {cfg.divergence_limit:.3g}; last checkpoint kept at {last_good}",
                    last_checkpoint=str(last_good))
            reports.append(report)
            wall = None if deterministic else time.monotonic() - started
            metrics.write(json.dumps(report.to_record(step, wall_time=wall)) + "\n")
            done = step + 1
            if done % cfg.checkpoint_every == 0 and done < cfg.steps:
                last_good = emit(done)

    final = save_checkpoint(out / FINAL_DIR, net, domain_names=domain_names,
                            regime=cfg.regime, step=cfg.steps, weights=weights_map, extra=extra)
    _save_state(final, cfg.steps, opt_d, opt_g, noise_g, samplers)
    return TrainResult(checkpoint_dir=final, out_dir=out, final_step=cfg.steps,
                       reports=reports, metrics_path=metrics_path)


def train_pair(pair: tuple[int, int], data: Mapping[int, object], model_cfg: ModelConfig,
               cfg: TrainConfig, out_dir: str | Path,
               domain_names: Sequence[str] | None = None, deterministic: bool = True,
               resume_from: str | Path | None = None,
               init: NetworkSet | None = None) -> TrainResult:
    """Train only the two domains of `pair` inside a full-width NetworkSet."""
    if cfg.regime != "pair":
        raise ContractError(f"train_pair requires regime='pair', got {cfg.regime!r}")
    i, j = pair
    if i == j:
        raise ContractError("pair must name two distinct domains")
    net = init if init is not None else build_networks(model_cfg, seed=cfg.seed)
    _check_init(net, model_cfg)
    return run_training(net, data, model_cfg, cfg, out_dir, pairing=((i, j),),
                        domain_names=domain_names, deterministic=deterministic,
                        resume_from=resume_from)


def train_joint(data: Mapping[int, object], model_cfg: ModelConfig, cfg: TrainConfig,
                out_dir: str | Path, init: NetworkSet | None = None, pairing=None,
                domain_names: Sequence[str] | None = None, deterministic: bool = True,
                resume_from: str | Path | None = None,
                manifest_extra: dict | None = None) -> TrainResult:
    """Train all pairs at once; `init` warm-starts from a transplanted model."""
    net = init if init is not None else build_networks(model_cfg, seed=cfg.seed)
    _check_init(net, model_cfg)
    return run_training(net, data, model_cfg, cfg, out_dir, pairing=pairing,
                        domain_names=domain_names, deterministic=deterministic,
                        resume_from=resume_from, manifest_extra=manifest_extra)


def _check_init(net: NetworkSet, model_cfg: ModelConfig) -> None:
    if net.cfg.as_dict() != model_cfg.as_dict():
        raise ContractError("initial NetworkSet does not match the model config")


def _copy_domain_private(dst: NetworkSet, src: NetworkSet, d: int) -> None:
    from latentstack.checkpoints import _private_state

    dst.encoders[d].load_state_dict(_private_state(src.encoders[d]), strict=False)
    dst.decoders[d].load_state_dict(_private_state(src.decoders[d]), strict=False)
    dst.discriminators[d].load_state_dict(src.discriminators[d].state_dict())


def warm_start_transplant(ckpt_pair1: str | Path, ckpt_pair2: str | Path,
                          policy: str = "pair_one") -> tuple[NetworkSet, dict]:
    """Merge two per-pair checkpoints into one joint model.

    Domain-private parameters come verbatim from whichever checkpoint
    trained that domain. The single shared block is taken from pair one,
    pair two, or their elementwise average, per `policy`. Returns the merged
    network and a provenance mapping for the manifest.
    """
    if policy not in TRANSPLANT_POLICIES:
        raise TransplantError("policy", f"must be one of {TRANSPLANT_POLICIES}, got {policy!r}")
    net1, man1 = load_checkpoint(ckpt_pair1)
    net2, man2 = load_checkpoint(ckpt_pair2)
    if man1.model != man2.model:
        bad = sorted(k for k in set(man1.model) | set(man2.model)
                     if man1.model.get(k) != man2.model.get(k))
        raise TransplantError(bad[0], f"model configs differ on field(s): {', '.join(bad)}")
    if man1.domain_names != man2.domain_names:
        raise TransplantError("domain_names", "checkpoints disagree on domain names")
    cfg = man1.model_config()
    active1 = tuple(man1.extra.get("active_domains", ()))
    active2 = tuple(man2.extra.get("active_domains", ()))
    if set(active1) & set(active2):
        raise TransplantError("active_domains",
                              f"checkpoints trained overlapping domains {active1} / {active2}")
    if set(active1) | set(active2) != set(range(cfg.num_domains)):
        raise TransplantError("active_domains",
                              "checkpoints do not cover all domains between them")

    merged = NetworkSet(cfg)
    for d in active1:
        _copy_domain_private(merged, net1, d)
    for d in active2:
        _copy_domain_private(merged, net2, d)
    if policy == "pair_one":
        merged.shared.load_state_dict(net1.shared.state_dict())
    elif policy == "pair_two":
        merged.shared.load_state_dict(net2.shared.state_dict())
    else:
        s1, s2 = net1.shared.state_dict(), net2.shared.state_dict()
        merged.shared.load_state_dict({k: (s1[k] + s2[k]) / 2 for k in s1})
    merged.eval()

    info = {
        "transplant_policy": policy,
        "source_pair_one": {"path": str(ckpt_pair1), "digest": bundle_digest(ckpt_pair1),
                            "domains": list(active1)},
        "source_pair_two": {"path": str(ckpt_pair2), "digest": bundle_digest(ckpt_pair2),
                            "domains": list(active2)},
    }
    return merged, info


def read_metrics(out_dir: str | Path) -> list[dict]:
    path = Path(out_dir) / METRICS_NAME if Path(out_dir).is_dir() else Path(out_dir)
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records
