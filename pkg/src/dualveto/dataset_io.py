"""Cohort file ingestion, validation and member aggregation.

A cohort file is a header-labeled UTF-8 CSV with '.'-decimal numbers and
one row per (id, member_id) pair:

    id,split,label,member_id,logit_0,logit_1,e_0,...,e_{d-1}

``split`` is train/val/test with an optional fold suffix (``val:3``),
``label`` is 0, 1 or empty (unknown), ``member_id`` identifies the
ensemble member or stochastic forward pass that produced the row. Rows
may appear in any order; lines starting with ``#`` are ignored. Column
names can be remapped through the ``columns`` argument (fed from the CLI
sidecar config).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CohortValidationError,
    DuplicateKey,
    EmptySplit,
    InconsistentDimension,
    InconsistentMembers,
    MissingColumn,
    NonFiniteValue,
    UnknownId,
    ValidationError,
)

SPLITS = ("train", "val", "test")

BASE_COLUMNS = ("id", "split", "label", "member_id", "logit_0", "logit_1")
EMBEDDING_PREFIX = "e_"


def _base_split(tag: str) -> str:
    base = tag.split(":", 1)[0]
    if base not in SPLITS:
        raise CohortValidationError(f"unknown split tag {tag!r}")
    if ":" in tag:
        suffix = tag.split(":", 1)[1]
        if not suffix.isdigit():
            raise CohortValidationError(f"malformed fold suffix in split tag {tag!r}")
    return base


@dataclass(frozen=True)
class Record:
    """One row of a cohort file: a single member's view of one instance."""

    id: str
    split: str
    label: int | None
    member_id: int
    logits: np.ndarray
    embedding: np.ndarray


@dataclass
class Cohort:
    """Validated cohort grouped by id.

    Every id carries the same sorted set of member_ids; ``logits`` is
    (n_ids, K, 2) and ``embeddings`` (n_ids, K, d), both aligned with
    ``ids`` and ``member_ids``. ``labels`` uses -1 for unknown. A Cohort
    is immutable by convention and safe to share across readers.
    """

    ids: tuple[str, ...]
    split_base: np.ndarray        # (n,) object, base split per id
    split_tags: np.ndarray        # (n, K) object, verbatim tag per record
    labels: np.ndarray            # (n,) int8, -1 for unknown
    member_ids: tuple[int, ...]
    logits: np.ndarray            # (n, K, 2)
    embeddings: np.ndarray        # (n, K, d)
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._index:
            self._index = {i: k for k, i in enumerate(self.ids)}

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_members(self) -> int:
        return len(self.member_ids)

    @property
    def d(self) -> int:
        return self.embeddings.shape[2]

    @property
    def class_priors(self) -> tuple[float, float] | None:
        labeled = self.labels[self.labels >= 0]
        if labeled.size == 0:
            return None
        p1 = float(np.mean(labeled == 1))
        return (1.0 - p1, p1)

    def index_of(self, id: str) -> int:
        try:
            return self._index[id]
        except KeyError:
            raise UnknownId(f"id {id!r} not in cohort") from None

    def split_mask(self, split: str) -> np.ndarray:
        return self.split_base == split

    def ids_in_split(self, split: str) -> tuple[str, ...]:
        mask = self.split_mask(split)
        return tuple(i for i, m in zip(self.ids, mask) if m)

    def records(self, id: str) -> list[Record]:
        k = self.index_of(id)
        label = None if self.labels[k] < 0 else int(self.labels[k])
        return [
            Record(
                id=id,
                split=str(self.split_tags[k, j]),
                label=label,
                member_id=m,
                logits=self.logits[k, j].copy(),
                embedding=self.embeddings[k, j].copy(),
            )
            for j, m in enumerate(self.member_ids)
        ]

    def validate(self) -> None:
        n, k, d = self.n, self.n_members, self.d
        if d < 2:
            raise InconsistentDimension(f"embedding dimension must be >= 2, got {d}")
        if self.logits.shape != (n, k, 2):
            raise InconsistentDimension("logits array shape mismatch")
        if self.embeddings.shape != (n, k, d):
            raise InconsistentDimension("embeddings array shape mismatch")
        if not np.all(np.isfinite(self.logits)):
            raise NonFiniteValue("non-finite logit in cohort")
        if not np.all(np.isfinite(self.embeddings)):
            raise NonFiniteValue("non-finite embedding value in cohort")
        bad = (self.labels < -1) | (self.labels > 1)
        if np.any(bad):
            raise CohortValidationError("labels must be 0, 1 or unknown")
        if not np.any(self.split_base == "val"):
            raise EmptySplit("val split is empty")


def _resolve_columns(
    header: Sequence[str], columns: Mapping[str, str] | None
) -> tuple[dict[str, int], list[int], int]:
    """Map logical column names to header positions.

    Returns (base column positions, embedding column positions ordered
    e_0..e_{d-1}, d). The embedding prefix itself can be overridden with
    the ``embedding_prefix`` key.
    """
    overrides = dict(columns or {})
    prefix = overrides.pop("embedding_prefix", EMBEDDING_PREFIX)
    names = {c: overrides.get(c, c) for c in BASE_COLUMNS}
    pos = {}
    for logical, actual in names.items():
        if actual not in header:
            raise MissingColumn(f"column {actual!r} (for {logical!r}) missing from header")
        pos[logical] = header.index(actual)

    emb: dict[int, int] = {}
    for j, name in enumerate(header):
        if name.startswith(prefix):
            tail = name[len(prefix):]
            if tail.isdigit():
                emb[int(tail)] = j
    if not emb:
        raise MissingColumn(f"no embedding columns with prefix {prefix!r}")
    d = max(emb) + 1
    missing = [i for i in range(d) if i not in emb]
    if missing:
        raise MissingColumn(f"embedding columns not contiguous, missing {prefix}{missing[0]}")
    if d < 2:
        raise InconsistentDimension("embedding dimension must be >= 2")
    return pos, [emb[i] for i in range(d)], d


def load_cohort(path: str, columns: Mapping[str, str] | None = None) -> Cohort:
    """Parse and validate a cohort CSV file.

    Rejects ragged rows, non-finite numbers, duplicate (id, member_id)
    keys, ids whose member sets differ, and files without a val split.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = None
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            header = [c.strip() for c in row]
            break
        if header is None:
            raise EmptySplit("val split is empty (file has no rows)")
        pos, emb_pos, d = _resolve_columns(header, columns)
        width = len(header)
        num_pos = [pos["logit_0"], pos["logit_1"], *emb_pos]

        raw_ids: list[str] = []
        raw_tags: list[str] = []
        raw_labels: list[str] = []
        raw_members: list[str] = []
        num_rows: list[list[str]] = []
        row_numbers: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != width:
                raise InconsistentDimension(
                    f"row {lineno}: expected {width} fields, found {len(row)}"
                )
            raw_ids.append(row[pos["id"]])
            raw_tags.append(row[pos["split"]].strip())
            raw_labels.append(row[pos["label"]].strip())
            raw_members.append(row[pos["member_id"]].strip())
            num_rows.append([row[j] for j in num_pos])
            row_numbers.append(lineno)

    if not raw_ids:
        raise EmptySplit("val split is empty (file has no data rows)")

    try:
        numeric = np.asarray(num_rows, dtype=np.float64)
    except ValueError:
        for i, vals in enumerate(num_rows):
            for v in vals:
                try:
                    float(v)
                except ValueError:
                    raise NonFiniteValue(
                        f"row {row_numbers[i]}: {v!r} is not a finite number"
                    ) from None
        raise  # pragma: no cover - unreachable
    finite = np.isfinite(numeric).all(axis=1)
    if not finite.all():
        bad = row_numbers[int(np.argmin(finite))]
        raise NonFiniteValue(f"row {bad}: non-finite value")

    members = []
    for i, m in enumerate(raw_members):
        if not m.isdigit():
            raise CohortValidationError(
                f"row {row_numbers[i]}: member_id must be a non-negative integer, got {m!r}"
            )
        members.append(int(m))

    labels = []
    for i, s in enumerate(raw_labels):
        if s == "":
            labels.append(-1)
        elif s in ("0", "1"):
            labels.append(int(s))
        else:
            raise CohortValidationError(f"row {row_numbers[i]}: label must be 0, 1 or empty")

    bases = [_base_split(t) for t in raw_tags]

    member_set = sorted(set(members))
    member_index = {m: j for j, m in enumerate(member_set)}
    ids = sorted(set(raw_ids))
    id_index = {i: k for k, i in enumerate(ids)}
    n, k_count = len(ids), len(member_set)

    logits = np.full((n, k_count, 2), np.nan)
    embeddings = np.full((n, k_count, d), np.nan)
    tags = np.full((n, k_count), None, dtype=object)
    base_per_id = np.full(n, None, dtype=object)
    label_per_id = np.full(n, -2, dtype=np.int8)
    seen: set[tuple[str, int]] = set()

    for i in range(len(raw_ids)):
        key = (raw_ids[i], members[i])
        if key in seen:
            raise DuplicateKey(f"duplicate (id, member_id) = {key}")
        seen.add(key)
        r = id_index[raw_ids[i]]
        c = member_index[members[i]]
        logits[r, c] = numeric[i, :2]
        embeddings[r, c] = numeric[i, 2:]
        tags[r, c] = raw_tags[i]
        if base_per_id[r] is None:
            base_per_id[r] = bases[i]
        elif base_per_id[r] != bases[i]:
            raise CohortValidationError(
                f"id {raw_ids[i]!r} appears in splits {base_per_id[r]} and {bases[i]}"
            )
        if label_per_id[r] == -2:
            label_per_id[r] = labels[i]
        elif label_per_id[r] != labels[i]:
            raise CohortValidationError(f"id {raw_ids[i]!r} has conflicting labels")

    holes = np.isnan(logits).any(axis=(1, 2))
    if holes.any():
        bad_id = ids[int(np.argmax(holes))]
        raise InconsistentMembers(
            f"id {bad_id!r} is missing rows for some member_ids; "
            f"every id must cover member_ids {member_set}"
        )

    cohort = Cohort(
        ids=tuple(ids),
        split_base=base_per_id,
        split_tags=tags,
        labels=label_per_id.astype(np.int8),
        member_ids=tuple(member_set),
        logits=logits,
        embeddings=embeddings,
    )
    cohort.validate()
    return cohort


def save_cohort(cohort: Cohort, path: str, header_comment: str | None = None) -> None:
    """Write a cohort back to CSV, rows sorted by (id, member_id).

    Floats are rendered with 17 significant digits so load(save(c))
    reproduces c bit-exactly.
    """
    n, k, d = cohort.n, cohort.n_members, cohort.d
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        cols = list(BASE_COLUMNS) + [f"{EMBEDDING_PREFIX}{i}" for i in range(d)]
        fh.write(",".join(cols) + "\n")
        fmt = "%s,%s,%s,%d," + ",".join(["%.17g"] * (2 + d)) + "\n"
        for r in range(n):
            label = "" if cohort.labels[r] < 0 else str(int(cohort.labels[r]))
            for c in range(k):
                fh.write(
                    fmt
                    % (
                        cohort.ids[r],
                        cohort.split_tags[r, c],
                        label,
                        cohort.member_ids[c],
                        *cohort.logits[r, c],
                        *cohort.embeddings[r, c],
                    )
                )


def softmax2(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def aggregate_members(
    cohort: Cohort, temperatures: Mapping[int, float]
) -> tuple[np.ndarray, np.ndarray]:
    """Average per-member calibrated probabilities and score their entropy.

    Each member's logits are divided by that member's temperature before
    the softmax; the aggregate is the arithmetic mean over members and
    the entropy is computed on the aggregate. Returns (probs (n, 2),
    entropy (n,)) aligned with ``cohort.ids``.
    """
    try:
        t = np.asarray([float(temperatures[m]) for m in cohort.member_ids])
    except KeyError as exc:
        raise ValidationError(f"no temperature for member_id {exc.args[0]}") from None
    if np.any(t <= 0) or not np.all(np.isfinite(t)):
        raise ValidationError("temperatures must be positive finite reals")
    probs_members = softmax2(cohort.logits / t[None, :, None])
    probs = probs_members.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    entropy = -terms.sum(axis=1)
    return probs, entropy


def reference_embedding(cohort: Cohort, id: str) -> np.ndarray:
    """Embedding of the lowest member_id for the given id."""
    return cohort.embeddings[cohort.index_of(id), 0].copy()


def reference_embeddings(cohort: Cohort, indices: Iterable[int] | None = None) -> np.ndarray:
    """Lowest-member embeddings for a batch of id indices (all by default)."""
    if indices is None:
        return cohort.embeddings[:, 0, :].copy()
    idx = np.asarray(list(indices), dtype=np.intp)
    return cohort.embeddings[idx, 0, :].copy()
