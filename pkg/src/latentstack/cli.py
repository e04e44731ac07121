"""Command-line entry point.

Subcommands: prepare-data, synth-data, train, compose, evaluate,
train-classifier. Global flags `--config`, `--seed`, `--deterministic`,
`--out` may appear before or after the subcommand; flag values override
config-file values, which override documented defaults.

Exit codes: 0 success, 2 configuration or format problem, 3 I/O failure,
4 training divergence (the last good checkpoint path is printed).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from latentstack import __version__
from latentstack.attributes import DomainSpec, build_marginal_sets, compile_predicate, \
    load_attribute_index
from latentstack.checkpoints import load_checkpoint, load_manifest
from latentstack.composer import apply_chain, parse_chain, render_grid, save_intermediates
from latentstack.configs import ClassifierSpec, ModelConfig, TrainConfig, as_dict, \
    config_hash, load_config_file
from latentstack.errors import ConfigError, ContractError, DivergenceError, FormatError, \
    IngestionError, NumericalError
from latentstack.evaluator import cycle_consistency_metric, load_classifier, oracle_labels, \
    presence_metric, train_classifier
from latentstack.imaging import load_image, read_manifest, write_manifest, \
    write_synthetic_dataset
from latentstack.networks import IdentityNetworkSet
from latentstack.synthetic import ALL_COMBINATIONS, SYNTH_PAIRING, generate_domain_images, \
    stack_images, synth_generate
from latentstack.training import derive_seed, train_joint, train_pair, warm_start_transplant

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
LOCK_NAME = ".lock"
RUN_MANIFEST_NAME = "run.json"


def _g(args: argparse.Namespace, name: str, default=None):
    return getattr(args, name, default)


def _load_sections(args) -> dict:
    path = _g(args, "config")
    return load_config_file(path) if path else {}


def _section(sections: dict, name: str) -> dict:
    return dict(sections.get(name, {}))


def _seed_for(args, *sections: dict, default: int = 0) -> int:
    if _g(args, "seed") is not None:
        return int(_g(args, "seed"))
    for sec in sections:
        if "seed" in sec:
            return int(sec["seed"])
    return default


def _require_out(args) -> Path:
    out = _g(args, "out")
    if not out:
        raise ConfigError("--out is required for this command")
    return Path(out)


@contextmanager
def run_lock(directory: Path):
    """One run per output directory; stale locks must be removed by hand."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {directory} is locked by another run "
                          f"(remove {lock} if it is stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


def write_run_manifest(out_dir: Path, command: str, seed: int, effective_config: dict,
                       inputs: list[str], outputs: list[str], started: float,
                       deterministic: bool) -> None:
    payload = {
        "command": command,
        "config_hash": config_hash(effective_config),
        "seed": seed,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "started": _iso(started),
        "ended": _iso(time.time()),
        "artifact_version": __version__,
        "deterministic": deterministic,
        "effective_config": effective_config,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / (RUN_MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(out_dir / RUN_MANIFEST_NAME)


def _load_any_checkpoint(path: str | Path):
    """Load a trained bundle or the identity debug bundle."""
    p = Path(path)
    raw_path = p / "manifest.json"
    if raw_path.exists():
        raw = json.loads(raw_path.read_text())
        if isinstance(raw, dict) and raw.get("kind") == "identity":
            net = IdentityNetworkSet(
                num_domains=int(raw.get("num_domains", 4)),
                image_size=int(raw.get("image_size", 32)),
                channels=int(raw.get("channels", 3)))
            names = tuple(raw.get("domain_names",
                                  [f"domain_{d}" for d in range(net.num_domains)]))
            return net, names, net.image_size
    net, manifest = load_checkpoint(p)
    return net, tuple(manifest.domain_names), net.cfg.image_size


def save_identity_checkpoint(dirpath: str | Path, num_domains: int = 4, image_size: int = 32,
                             channels: int = 3, domain_names=None) -> Path:
    """Write the manifest-only identity debug bundle."""
    out = Path(dirpath)
    out.mkdir(parents=True, exist_ok=True)
    names = list(domain_names or [f"domain_{d}" for d in range(num_domains)])
    payload = {"kind": "identity", "schema_version": 1, "num_domains": num_domains,
               "image_size": image_size, "channels": channels, "domain_names": names}
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(out / "manifest.json")
    return out


def _resolve_domain_name(name: str, domain_names) -> int:
    lowered = [n.lower() for n in domain_names]
    if name.strip().lower() not in lowered:
        raise ConfigError(f"unknown domain {name!r}; known: {', '.join(domain_names)}")
    return lowered.index(name.strip().lower())


def _collect_input_files(paths: list[str]) -> list[Path]:
    files: list[Path] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            found = sorted(path.glob("*.png"))
            if not found:
                raise IngestionError(f"no .png files in {path}")
            files.extend(found)
        elif path.exists():
            files.append(path)
        else:
            raise IngestionError(f"input {path} does not exist")
    if not files:
        raise IngestionError("no input images given")
    return files


def _load_dataset_arrays(data_dir: str | Path):
    from latentstack.imaging import load_domain_images

    manifest = read_manifest(data_dir)
    arrays = load_domain_images(data_dir)
    names = tuple(manifest["domain_names"])
    by_id = {i: arrays[n] for i, n in enumerate(names)}
    return by_id, names, manifest


# -- subcommands --------------------------------------------------------------

def cmd_synth_data(args) -> int:
    sections = _load_sections(args)
    data = _section(sections, "data")
    seed = _seed_for(args, data)
    count = int(data.get("images_per_domain", 200))
    size = int(data.get("image_size", 32))
    excluded = data.get("excluded_combination", ["blue", "striped"])
    excluded = tuple(excluded) if excluded else None

    if _g(args, "dry_run", False):
        domains = generate_domain_images(count, seed=seed, image_size=size, excluded=excluded)
        for name, samples in domains.items():
            print(f"{name}: {len(samples)} images")
        print("dry run; nothing written")
        return EXIT_OK

    out = _require_out(args)
    started = time.time()
    with run_lock(out):
        domains = generate_domain_images(count, seed=seed, image_size=size, excluded=excluded)
        manifest = write_synthetic_dataset(out, domains, pairing=SYNTH_PAIRING, seed=seed,
                                           image_size=size, excluded=excluded)
        for name in manifest["domain_names"]:
            print(f"{name}: {manifest['counts'][name]} images")
        write_run_manifest(out, "synth-data", seed, {"data": data}, inputs=[],
                           outputs=[str(out)], started=started,
                           deterministic=_g(args, "deterministic", False))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_prepare_data(args) -> int:
    sections = _load_sections(args)
    data = _section(sections, "data")
    for key in ("attributes_file", "domain_names", "predicates"):
        if key not in data:
            raise ConfigError(f"prepare-data needs data.{key} in the config file")
    spec = DomainSpec(domain_names=list(data["domain_names"]),
                      predicates=list(data["predicates"]),
                      exclusion=str(data.get("exclusion", "false")),
                      pairing=[tuple(p) for p in data.get("pairing", [])])
    index = load_attribute_index(data["attributes_file"])
    datasets = build_marginal_sets(index, spec,
                                   holdout_fraction=float(data.get("holdout_fraction", 0.05)))

    # re-verify the exclusion on the finished sets, independent of the builder
    excl_mask = compile_predicate(spec.exclusion, index.attribute_names)(index.values)
    excluded_ids = {i for i, bad in zip(index.image_ids, excl_mask) if bad}
    violations = {name: sum(1 for i in members + holdout if i in excluded_ids)
                  for name, members, holdout
                  in zip(spec.domain_names, datasets.members, datasets.holdout)}

    for name, count, hold in zip(spec.domain_names, datasets.counts, datasets.holdout_counts):
        print(f"{name}: {count} train, {hold} holdout, {violations[name]} exclusion violations")
    if _g(args, "dry_run", False):
        print("dry run; nothing written")
        return EXIT_OK

    out = _require_out(args)
    started = time.time()
    with run_lock(out):
        for name, members, holdout in zip(spec.domain_names, datasets.members, datasets.holdout):
            ddir = out / name
            ddir.mkdir(parents=True, exist_ok=True)
            (ddir / "ids.txt").write_text("".join(f"{i}\n" for i in members))
            (ddir / "ids_holdout.txt").write_text("".join(f"{i}\n" for i in holdout))
        write_manifest(out, {
            "kind": "attribute_domains",
            "domain_names": list(spec.domain_names),
            "predicates": list(spec.predicates),
            "exclusion": spec.exclusion,
            "pairing": [list(p) for p in spec.pairing],
            "counts": dict(zip(spec.domain_names, datasets.counts)),
            "holdout_counts": dict(zip(spec.domain_names, datasets.holdout_counts)),
            "exclusion_violations": violations,
            "content_hash": datasets.content_hash(),
            "attributes_file": str(data["attributes_file"]),
        })
        write_run_manifest(out, "prepare-data", 0, {"data": data},
                           inputs=[str(data["attributes_file"])], outputs=[str(out)],
                           started=started, deterministic=_g(args, "deterministic", False))
    print(f"wrote {out}")
    return EXIT_OK


def _normalize_regime(regime: str) -> str:
    return "warm_start_finetune" if regime == "warm_start" else regime


def cmd_train(args) -> int:
    sections = _load_sections(args)
    model_sec = _section(sections, "model")
    train_sec = _section(sections, "train")
    weights_sec = _section(sections, "weights")
    if not _g(args, "data"):
        raise ConfigError("train needs --data pointing at a dataset directory")
    arrays, names, data_manifest = _load_dataset_arrays(_g(args, "data"))
    model_sec.setdefault("image_size", int(data_manifest["image_size"]))
    model_sec.setdefault("num_domains", len(names))
    model_cfg = ModelConfig.from_mapping(model_sec)

    regime = _normalize_regime(_g(args, "regime") or train_sec.get("regime", "joint"))
    steps_given = _g(args, "steps") is not None or "steps" in train_sec
    train_sec["regime"] = regime
    if _g(args, "steps") is not None:
        train_sec["steps"] = int(_g(args, "steps"))
    if weights_sec:
        train_sec["weights"] = weights_sec
    train_sec["seed"] = _seed_for(args, train_sec)
    policy = train_sec.pop("transplant_policy", "pair_one")

    out = _require_out(args)
    deterministic = _g(args, "deterministic", False)
    started = time.time()
    effective = {"model": as_dict(model_cfg), "train": dict(train_sec),
                 "data": {"path": str(_g(args, "data"))}}
    inputs = [str(_g(args, "data"))]

    with run_lock(out):
        if regime == "pair":
            if not _g(args, "pair"):
                raise ConfigError("train --regime pair needs --pair src,dst")
            parts = [p for p in _g(args, "pair").split(",") if p.strip()]
            if len(parts) != 2:
                raise ConfigError(f"--pair must name two domains, got {_g(args, 'pair')!r}")
            pair = tuple(_resolve_domain_name(p, names) for p in parts)
            cfg = TrainConfig(**train_sec)
            result = train_pair(pair, arrays, model_cfg, cfg, out, domain_names=names,
                                deterministic=deterministic)
        elif regime == "joint":
            cfg = TrainConfig(**train_sec)
            result = train_joint(arrays, model_cfg, cfg, out, domain_names=names,
                                 deterministic=deterministic)
        elif regime == "warm_start_finetune":
            sources = _g(args, "init_from")
            if not sources or len(sources) != 2:
                raise ConfigError("train --regime warm_start needs --from ckptA ckptB")
            merged, info = warm_start_transplant(sources[0], sources[1], policy=policy)
            if not steps_given:
                # default fine-tune budget: 20% of the source per-pair budget
                train_sec["steps"] = max(1, round(0.2 * load_manifest(sources[0]).step))
            cfg = TrainConfig(**train_sec)
            if merged.cfg.as_dict() != model_cfg.as_dict():
                raise ConfigError("transplanted checkpoints disagree with the model config; "
                                  "drop the model section or match the source checkpoints")
            result = train_joint(arrays, model_cfg, cfg, out, init=merged, domain_names=names,
                                 deterministic=deterministic, manifest_extra=info)
            inputs.extend(str(s) for s in sources)
        else:
            raise ConfigError(f"unknown regime {regime!r}")

        write_run_manifest(out, "train", cfg.seed, effective, inputs=inputs,
                           outputs=[str(result.checkpoint_dir), str(result.metrics_path)],
                           started=started, deterministic=deterministic)
    last = result.reports[-1] if result.reports else None
    if last is not None:
        print(f"step {result.final_step}: generator_total={last.generator_total:.4f} "
              f"discriminator_total={last.discriminator_total:.4f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return EXIT_OK


def cmd_compose(args) -> int:
    if not _g(args, "checkpoint"):
        raise ConfigError("compose needs --checkpoint")
    net, names, size = _load_any_checkpoint(_g(args, "checkpoint"))
    chain = parse_chain(_g(args, "chain") or "", names)
    files = _collect_input_files(_g(args, "inputs") or [])
    batch = torch.as_tensor(np.stack([load_image(f, size) for f in files]))

    out = _require_out(args)
    started = time.time()
    trace = apply_chain(net, chain, batch)
    per_input = trace.per_input()
    grid_path = render_grid(per_input, out)
    outputs = [str(grid_path)]
    if _g(args, "save_intermediates"):
        for f, tr in zip(files, per_input):
            outputs.extend(str(p) for p in
                           save_intermediates(tr, f.stem, _g(args, "save_intermediates")))
    write_run_manifest(grid_path.parent, "compose", _seed_for(args),
                       {"chain": _g(args, "chain") or "", "checkpoint": str(_g(args, "checkpoint"))},
                       inputs=[str(f) for f in files], outputs=outputs, started=started,
                       deterministic=_g(args, "deterministic", False))
    print(f"wrote {grid_path} ({len(per_input)} rows x {len(trace.images)} columns)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    metric = _g(args, "metric")
    report: dict
    if metric == "cycle":
        if not (_g(args, "checkpoint") and _g(args, "pair") and _g(args, "data")):
            raise ConfigError("evaluate --metric cycle needs --checkpoint, --pair and --data")
        net, names, _ = _load_any_checkpoint(_g(args, "checkpoint"))
        parts = [p for p in _g(args, "pair").split(",") if p.strip()]
        if len(parts) != 2:
            raise ConfigError(f"--pair must name two domains, got {_g(args, 'pair')!r}")
        pair = tuple(_resolve_domain_name(p, names) for p in parts)
        arrays, data_names, _m = _load_dataset_arrays(_g(args, "data"))
        source_name = names[pair[0]]
        source_id = _resolve_domain_name(source_name, data_names)
        value = cycle_consistency_metric(net, pair, arrays[source_id],
                                         int(_g(args, "sample_size") or 128),
                                         seed=_seed_for(args))
        print(value)
        report = {"metric": "cycle", "pair": [names[pair[0]], names[pair[1]]], "value": value}
    elif metric == "presence":
        if not (_g(args, "checkpoint") and _g(args, "classifier") and _g(args, "inputs")
                and _g(args, "chain") is not None and _g(args, "expected")):
            raise ConfigError("evaluate --metric presence needs --checkpoint, --classifier, "
                              "--inputs, --chain and --expected")
        net, names, size = _load_any_checkpoint(_g(args, "checkpoint"))
        handle = load_classifier(_g(args, "classifier"))
        chain = parse_chain(_g(args, "chain"), names)
        files = _collect_input_files(_g(args, "inputs"))
        batch = torch.as_tensor(np.stack([load_image(f, size) for f in files]))
        expected = [p.strip() for p in _g(args, "expected").split(",") if p.strip()]
        result = presence_metric(net, handle, batch, chain, expected)
        print(result.format_table())
        report = result.to_json()
    elif metric == "oracle":
        files = _collect_input_files(_g(args, "inputs") or [])
        size = int(_g(args, "sample_size") or 32)
        batch = np.stack([load_image(f, 32) for f in files])
        labels = oracle_labels(batch)
        counts: dict[str, int] = {}
        for f, (color, texture) in zip(files, labels):
            print(f"{f.name}: {color} {texture}")
            counts[f"{color}_{texture}"] = counts.get(f"{color}_{texture}", 0) + 1
        report = {"metric": "oracle", "counts": counts}
    else:
        raise ConfigError(f"unknown metric {metric!r}; choose cycle, presence, or oracle")

    if _g(args, "out"):
        out = Path(_g(args, "out"))
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(f"wrote {out}")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    sections = _load_sections(args)
    data = _section(sections, "data")
    seed = _seed_for(args, data)
    size = int(data.get("image_size", 32))
    per_class = int(_g(args, "images_per_class") or 500)
    spec = ClassifierSpec(architecture=_g(args, "architecture") or "tiny",
                          steps=int(_g(args, "steps") or 300), seed=seed)
    datasets = {}
    for k, (color, texture) in enumerate(ALL_COMBINATIONS):
        samples = synth_generate(per_class, {(color, texture)},
                                 seed=derive_seed(seed, "classifier-data", k), image_size=size)
        datasets[f"{color}_{texture}"] = stack_images(samples)

    out = _require_out(args)
    started = time.time()
    with run_lock(out):
        result = train_classifier(datasets, spec, out)
        write_run_manifest(out, "train-classifier", seed, {"spec": as_dict(spec)},
                           inputs=[], outputs=[str(out)], started=started,
                           deterministic=_g(args, "deterministic", False))
    print(f"holdout accuracy: {result.holdout_accuracy:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML config file with model/train/data/weights sections")
    common.add_argument("--seed", type=int, help="run seed; overrides the config file")
    common.add_argument("--deterministic", action="store_true",
                        help="omit wall-clock fields so reruns are bit-identical")
    common.add_argument("--out", help="output directory or file")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="latentstack", parents=[common],
                                     description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", parents=[common],
                       help="build attribute-defined domain id lists")
    p.add_argument("--dry-run", action="store_true", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("synth-data", parents=[common],
                       help="render the synthetic shape corpus")
    p.add_argument("--dry-run", action="store_true", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="run one training regime")
    p.add_argument("--regime", choices=["pair", "joint", "warm_start", "warm_start_finetune"],
                   default=argparse.SUPPRESS)
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
    p.add_argument("--pair", default=argparse.SUPPRESS, help="two domain names, comma separated")
    p.add_argument("--from", dest="init_from", nargs=2, metavar=("CKPT_A", "CKPT_B"),
                   default=argparse.SUPPRESS, help="pair checkpoints for warm start")
    p.add_argument("--steps", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compose", parents=[common], help="apply a translation chain")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--chain", default=argparse.SUPPRESS, help="e.g. 'red>blue,plain>striped'")
    p.add_argument("--inputs", nargs="+", default=argparse.SUPPRESS,
                   help="image files or directories")
    p.add_argument("--save-intermediates", dest="save_intermediates",
                   default=argparse.SUPPRESS, help="directory for per-stage images")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("evaluate", parents=[common], help="run a metric over a checkpoint")
    p.add_argument("--metric", choices=["cycle", "presence", "oracle"],
                   default=argparse.SUPPRESS)
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--classifier", default=argparse.SUPPRESS)
    p.add_argument("--pair", default=argparse.SUPPRESS)
    p.add_argument("--data", default=argparse.SUPPRESS)
    p.add_argument("--inputs", nargs="+", default=argparse.SUPPRESS)
    p.add_argument("--chain", default=argparse.SUPPRESS)
    p.add_argument("--expected", default=argparse.SUPPRESS,
                   help="expected class per stage, comma separated")
    p.add_argument("--sample-size", dest="sample_size", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-classifier", parents=[common],
                       help="fit the attribute-combination classifier")
    p.add_argument("--architecture", choices=["tiny", "vgg11"], default=argparse.SUPPRESS)
    p.add_argument("--steps", type=int, default=argparse.SUPPRESS)
    p.add_argument("--images-per-class", dest="images_per_class", type=int,
                   default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train_classifier)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        if e.last_checkpoint:
            print(f"last good checkpoint: {e.last_checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except IngestionError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
