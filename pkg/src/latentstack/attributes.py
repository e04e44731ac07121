"""Attribute-labeled corpora and marginal domain construction.

Parses the CelebA-style attribute list (row count, attribute-name header,
then ``<image-id> <±1> ... <±1>`` rows), evaluates boolean predicates over
the named attributes, and builds the N marginal domain sets with a global
exclusion predicate so chosen attribute combinations never appear in any
training domain.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from latentstack.errors import ConfigError, FormatError


@dataclass
class AttributeIndex:
    """Ordered image-id -> boolean attribute vector table."""

    attribute_names: list[str]
    image_ids: list[str]
    values: np.ndarray  # (num_images, num_attributes) bool

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.image_ids), len(self.attribute_names)):
            raise FormatError(
                f"attribute matrix shape {self.values.shape} does not match "
                f"{len(self.image_ids)} ids x {len(self.attribute_names)} attributes")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise FormatError("image ids are not unique")

    def __len__(self) -> int:
        return len(self.image_ids)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.attribute_names.index(name)]
        except ValueError:
            raise ConfigError(f"unknown attribute {name!r}; available: {self.attribute_names}") from None


def load_attribute_index(path: str | Path) -> AttributeIndex:
    """Parse an attribute list file.

    Line 1 is the row count, line 2 the whitespace-separated attribute names,
    and every following row is an image id followed by one ``1``/``-1`` token
    per attribute.
    """
    p = Path(path)
    lines = p.read_text().splitlines()
    if not lines:
        raise FormatError(f"{p}: empty file, expected a row count on line 1")
    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise FormatError(f"{p}: line 1 must be an integer row count, got {lines[0]!r}") from None
    if declared == 0:
        names = lines[1].split() if len(lines) > 1 else []
        if any(ln.strip() for ln in lines[2:]):
            raise FormatError(f"{p}: line 1 declares 0 rows but data rows found")
        return AttributeIndex(names, [], np.zeros((0, len(names)), dtype=bool))
    if len(lines) < 2:
        raise FormatError(f"{p}: missing attribute-name header on line 2")
    names = lines[1].split()
    rows = [ln for ln in lines[2:] if ln.strip()]
    if len(rows) != declared:
        raise FormatError(f"{p}: line 1 declares {declared} rows but {len(rows)} data rows found")

    ids: list[str] = []
    values = np.zeros((declared, len(names)), dtype=bool)
    for i, ln in enumerate(rows):
        parts = ln.split()
        lineno = i + 3
        if len(parts) != len(names) + 1:
            raise FormatError(
                f"{p}: line {lineno} has {len(parts) - 1} attribute columns, expected {len(names)}")
        ids.append(parts[0])
        for j, tok in enumerate(parts[1:]):
            if tok == "1":
                values[i, j] = True
            elif tok == "-1":
                values[i, j] = False
            else:
                raise FormatError(
                    f"{p}: line {lineno}, column {names[j]!r}: token {tok!r} is not 1 or -1")
    return AttributeIndex(names, ids, values)


# -- predicate language -------------------------------------------------------
#
# Predicates are boolean expressions over attribute names, e.g.
# "Smiling and not Eyeglasses". Only `and`, `or`, `not`, parentheses, names,
# and the literals true/false are allowed.

Predicate = Callable[[np.ndarray], np.ndarray]


def compile_predicate(expr: str, attribute_names: Sequence[str]) -> Predicate:
    """Compile a boolean expression into a vectorized row filter.

    Returns a function mapping an (n, num_attributes) boolean matrix to an
    (n,) boolean mask.
    """
    try:
        tree = ast.parse(expr.strip() or "false", mode="eval")
    except SyntaxError as e:
        raise ConfigError(f"cannot parse predicate {expr!r}: {e.msg}") from None
    name_to_col = {n: i for i, n in enumerate(attribute_names)}

    def build(node: ast.AST) -> Callable[[np.ndarray], np.ndarray]:
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.BoolOp):
            parts = [build(v) for v in node.values]
            op = np.logical_and if isinstance(node.op, ast.And) else np.logical_or
            def run(m, parts=parts, op=op):
                out = parts[0](m)
                for part in parts[1:]:
                    out = op(out, part(m))
                return out
            return run
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
            inner = build(node.operand)
            return lambda m, inner=inner: np.logical_not(inner(m))
        if isinstance(node, ast.Constant) and isinstance(node.value, bool):
            v = node.value
            return lambda m, v=v: np.full(m.shape[0], v, dtype=bool)
        if isinstance(node, ast.Name):
            low = node.id.lower()
            if low in ("true", "false"):
                v = low == "true"
                return lambda m, v=v: np.full(m.shape[0], v, dtype=bool)
            if node.id not in name_to_col:
                raise ConfigError(
                    f"predicate {expr!r} references unknown attribute {node.id!r}; "
                    f"available: {list(attribute_names)}")
            col = name_to_col[node.id]
            return lambda m, col=col: m[:, col].copy()
        raise ConfigError(f"predicate {expr!r}: unsupported syntax {ast.dump(node)[:60]}")

    return build(tree)


@dataclass
class DomainSpec:
    """Membership rules for the N marginal domains.

    ``predicates`` and ``exclusion`` are expression strings; ``pairing`` lists
    (domain, domain) name pairs and must cover every domain exactly once.
    """

    domain_names: list[str]
    predicates: list[str]
    exclusion: str = "false"
    pairing: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        n = len(self.domain_names)
        if n == 0 or n % 2 != 0:
            raise ConfigError(f"number of domains must be even and > 0, got {n}")
        if len(self.predicates) != n:
            raise ConfigError("one predicate required per domain")
        if len(set(self.domain_names)) != n:
            raise ConfigError("domain names must be unique")
        self.pairing = [tuple(p) for p in self.pairing]
        if not self.pairing:
            self.pairing = [(self.domain_names[i], self.domain_names[i + 1]) for i in range(0, n, 2)]
        covered = [d for pair in self.pairing for d in pair]
        if sorted(covered) != sorted(self.domain_names):
            raise ConfigError(
                f"pairing must cover each domain exactly once; got {self.pairing} over {self.domain_names}")

    def pair_indices(self) -> list[tuple[int, int]]:
        idx = {n: i for i, n in enumerate(self.domain_names)}
        return [(idx[a], idx[b]) for a, b in self.pairing]


@dataclass
class DomainDatasets:
    """Per-domain image-id membership produced by `build_marginal_sets`."""

    spec: DomainSpec
    members: list[list[str]]  # image ids per domain, index order preserved
    holdout: list[list[str]]  # deterministic evaluation split per domain

    @property
    def counts(self) -> list[int]:
        return [len(m) for m in self.members]

    @property
    def holdout_counts(self) -> list[int]:
        return [len(h) for h in self.holdout]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, ids in zip(self.spec.domain_names, self.members):
            h.update(name.encode())
            for i in ids:
                h.update(i.encode())
            h.update(b"\x00")
        return h.hexdigest()


# The four-domain eyeglasses/smiling setup over CelebA attributes, with the
# smiling-while-wearing-glasses combination excluded from every domain.
CELEBA_EXPERIMENT_SPEC = DomainSpec(
    domain_names=["no_glasses", "glasses", "smiling", "not_smiling"],
    predicates=["not Eyeglasses", "Eyeglasses", "Smiling", "not Smiling"],
    exclusion="Smiling and Eyeglasses",
    pairing=[("no_glasses", "glasses"), ("smiling", "not_smiling")],
)


def holdout_mask(image_ids: Iterable[str], fraction: float) -> np.ndarray:
    """Deterministic per-id evaluation split: hash of the id, not position."""
    cut = int(round(fraction * 10000))
    out = []
    for i in image_ids:
        bucket = int.from_bytes(hashlib.md5(i.encode()).digest()[:4], "big") % 10000
        out.append(bucket < cut)
    return np.asarray(out, dtype=bool)


def build_marginal_sets(index: AttributeIndex, spec: DomainSpec,
                        holdout_fraction: float = 0.05) -> DomainDatasets:
    """Build the marginal domain sets with the exclusion applied globally.

    Domain d contains exactly the images satisfying predicate d and not the
    exclusion predicate; excluded images are dropped from every domain. Raises
    `ConfigError` if any domain comes out empty.
    """
    excl = compile_predicate(spec.exclusion, index.attribute_names)(index.values)
    ids = np.asarray(index.image_ids, dtype=object)
    members: list[list[str]] = []
    holdout: list[list[str]] = []
    for name, expr in zip(spec.domain_names, spec.predicates):
        mask = compile_predicate(expr, index.attribute_names)(index.values) & ~excl
        chosen = [str(s) for s in ids[mask]]
        if not chosen:
            raise ConfigError(
                f"domain {name!r} (predicate {expr!r}, exclusion {spec.exclusion!r}) is empty")
        hmask = holdout_mask(chosen, holdout_fraction)
        members.append([c for c, h in zip(chosen, hmask) if not h])
        holdout.append([c for c, h in zip(chosen, hmask) if h])
    return DomainDatasets(spec=spec, members=members, holdout=holdout)
