"""Acquisition side information: schema, records, encoding, corruption.

Side information is split into categorical variables (contrast, view,
source) represented by learned embeddings, and continuous scan
parameters (TR, TE, flip angle) passed through a learned linear map
after z-scoring on training statistics. Unknown continuous entries are
coded as zero after normalisation. The corruption modes used by the
ablation runner (random / wrong / mask) live here too.

The functions in this module are pure NumPy reference implementations;
the trainable torch encoder mirroring them is ``sign.SideInfoEncoder``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError
from .rng import substream_rng

__all__ = [
    "DEFAULT_CONTRASTS",
    "DEFAULT_VIEWS",
    "DEFAULT_SOURCES",
    "DEFAULT_CONTINUOUS",
    "SideInfoSchema",
    "SideInfoRecord",
    "ContinuousStats",
    "encode_categorical",
    "normalize_continuous",
    "encode_continuous",
    "corrupt_side_info",
]

DEFAULT_CONTRASTS = ("T1w", "T2w", "PDw", "MRA", "T2w-FS", "PDw-FS", "DESS")
DEFAULT_VIEWS = ("axial", "sagittal", "coronal")
DEFAULT_SOURCES = ("Siemens", "Philips", "GE", "unknown")
DEFAULT_CONTINUOUS = ("TR", "TE", "flip_angle")

CORRUPTION_MODES = ("random", "wrong", "mask")


@dataclass(frozen=True)
class SideInfoSchema:
    """Ordered categorical vocabularies and continuous field names.

    Each categorical field reserves index ``len(vocabulary)`` as a null
    id whose embedding contribution is exactly zero (used by mask-mode
    corruption; never produced by real data).
    """

    categorical_fields: tuple[tuple[str, tuple[str, ...]], ...] = (
        ("contrast", DEFAULT_CONTRASTS),
        ("view", DEFAULT_VIEWS),
        ("source", DEFAULT_SOURCES),
    )
    continuous_fields: tuple[str, ...] = DEFAULT_CONTINUOUS
    embed_dim: int = 32

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        seen = set()
        for name, vocab in self.categorical_fields:
            if not vocab:
                raise ConfigError(f"categorical field {name!r} has an empty vocabulary")
            if len(set(vocab)) != len(vocab):
                raise ConfigError(f"categorical field {name!r} has duplicate entries")
            seen.add(name)
        for name in self.continuous_fields:
            if name in seen:
                raise ConfigError(f"field name {name!r} used twice in schema")
            seen.add(name)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical_fields)

    @property
    def n_continuous(self) -> int:
        return len(self.continuous_fields)

    @property
    def categorical_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.categorical_fields)

    @property
    def field_names(self) -> tuple[str, ...]:
        return self.categorical_names + self.continuous_fields

    def vocabulary(self, name: str) -> tuple[str, ...]:
        for fname, vocab in self.categorical_fields:
            if fname == name:
                return vocab
        raise InvalidInputError(f"unknown categorical field {name!r}")

    def null_id(self, field_index: int) -> int:
        return len(self.categorical_fields[field_index][1])

    def categorical_id(self, name: str, value: str) -> int:
        vocab = self.vocabulary(name)
        try:
            return vocab.index(value)
        except ValueError:
            raise InvalidInputError(
                f"value {value!r} not in vocabulary of field {name!r}"
            ) from None

    def validate_record(self, rec: "SideInfoRecord") -> None:
        if len(rec.categorical_ids) != self.n_categorical:
            raise InvalidInputError(
                f"record has {len(rec.categorical_ids)} categorical ids, "
                f"schema expects {self.n_categorical}"
            )
        for i, cid in enumerate(rec.categorical_ids):
            if not (0 <= cid <= self.null_id(i)):
                name = self.categorical_fields[i][0]
                raise InvalidInputError(
                    f"categorical id {cid} out of range for field {name!r}"
                )
        if len(rec.continuous_values) != self.n_continuous:
            raise InvalidInputError(
                f"record has {len(rec.continuous_values)} continuous values, "
                f"schema expects {self.n_continuous}"
            )
        if len(rec.continuous_known) != self.n_continuous:
            raise InvalidInputError("continuous_known length mismatch")

    def to_dict(self) -> dict:
        return {
            "categorical": [
                {"name": name, "vocabulary": list(vocab)}
                for name, vocab in self.categorical_fields
            ],
            "continuous": list(self.continuous_fields),
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SideInfoSchema":
        return cls(
            categorical_fields=tuple(
                (entry["name"], tuple(entry["vocabulary"])) for entry in d["categorical"]
            ),
            continuous_fields=tuple(d["continuous"]),
            embed_dim=int(d["embed_dim"]),
        )


@dataclass(frozen=True)
class SideInfoRecord:
    """One image's side information.

    ``continuous_masked`` marks the whole continuous branch as ablated
    (its encoded vector is forced to zero), which is distinct from all
    values being merely unknown (those still pass zeros through the
    learned linear map).
    """

    categorical_ids: tuple[int, ...]
    continuous_values: tuple[float, ...]
    continuous_known: tuple[bool, ...]
    continuous_masked: bool = False

    def to_dict(self, schema: SideInfoSchema) -> dict:
        d: dict = {}
        for i, (name, vocab) in enumerate(schema.categorical_fields):
            cid = self.categorical_ids[i]
            d[name] = None if cid == schema.null_id(i) else vocab[cid]
        for j, name in enumerate(schema.continuous_fields):
            d[name] = self.continuous_values[j] if self.continuous_known[j] else None
        return d

    @classmethod
    def from_dict(cls, schema: SideInfoSchema, d: Mapping) -> "SideInfoRecord":
        cat_ids = []
        for i, (name, vocab) in enumerate(schema.categorical_fields):
            value = d.get(name)
            cat_ids.append(schema.null_id(i) if value is None else schema.categorical_id(name, value))
        values, known = [], []
        for name in schema.continuous_fields:
            value = d.get(name)
            if value is None:
                values.append(0.0)
                known.append(False)
            else:
                values.append(float(value))
                known.append(True)
        rec = cls(tuple(cat_ids), tuple(values), tuple(known))
        schema.validate_record(rec)
        return rec


@dataclass(frozen=True)
class ContinuousStats:
    """Per-field mean/std of the known continuous entries of the training split."""

    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        if any(s <= 0 for s in self.stds):
            raise ConfigError("continuous field std must be positive")

    @classmethod
    def from_records(
        cls, schema: SideInfoSchema, records: Sequence[SideInfoRecord]
    ) -> "ContinuousStats":
        """Compute stats over known entries; fields never observed get (0, 1)."""
        means, stds = [], []
        for j in range(schema.n_continuous):
            vals = np.array(
                [r.continuous_values[j] for r in records if r.continuous_known[j]],
                dtype=np.float64,
            )
            if vals.size == 0:
                means.append(0.0)
                stds.append(1.0)
                continue
            mean = float(vals.mean())
            std = float(vals.std())
            if std == 0.0:
                raise ConfigError(
                    f"continuous field {schema.continuous_fields[j]!r} is constant "
                    "on the training split; cannot z-score"
                )
            means.append(mean)
            stds.append(std)
        return cls(tuple(means), tuple(stds))

    def to_dict(self) -> dict:
        return {"means": list(self.means), "stds": list(self.stds)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContinuousStats":
        return cls(tuple(float(v) for v in d["means"]), tuple(float(v) for v in d["stds"]))


def encode_categorical(
    rec: SideInfoRecord, tables: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """Embed each categorical id by row lookup; null ids give zero vectors.

    ``tables[i]`` has shape (vocab_size_i, embed_dim); the reserved null
    id equals vocab_size_i and contributes a zero vector instead of a row.
    """
    out = []
    for i, table in enumerate(tables):
        table = np.asarray(table)
        cid = rec.categorical_ids[i]
        if not (0 <= cid <= table.shape[0]):
            raise InvalidInputError(
                f"categorical id {cid} out of range for table of size {table.shape[0]}"
            )
        if cid == table.shape[0]:
            # Reserved null id: contribution is exactly zero.
            out.append(np.zeros(table.shape[1], dtype=table.dtype))
        else:
            out.append(table[cid].copy())
    return out


def normalize_continuous(rec: SideInfoRecord, stats: ContinuousStats) -> np.ndarray:
    """z-score known entries; unknown or masked entries are exactly zero."""
    n = len(rec.continuous_values)
    if len(stats.means) != n:
        raise InvalidInputError("stats length does not match record")
    z = np.zeros(n, dtype=np.float64)
    if rec.continuous_masked:
        return z
    for j in range(n):
        if rec.continuous_known[j]:
            z[j] = (rec.continuous_values[j] - stats.means[j]) / stats.stds[j]
    return z


def encode_continuous(z: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Linear map of the stacked continuous variables: ``weight @ z + bias``."""
    z = np.asarray(z, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.ndim != 2 or z.ndim != 1 or weight.shape[1] != z.shape[0]:
        raise InvalidInputError(
            f"shape mismatch: weight {weight.shape} vs z {z.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise InvalidInputError(f"bias shape {bias.shape} does not match weight")
    return weight @ z + bias


def _resolve_selector(
    schema: SideInfoSchema, branch_selector: Iterable[str]
) -> tuple[list[int], list[int]]:
    """Split selected field names into categorical / continuous index lists."""
    cat_idx, cont_idx = [], []
    names = set(branch_selector)
    for name in names:
        if name in schema.categorical_names:
            cat_idx.append(schema.categorical_names.index(name))
        elif name in schema.continuous_fields:
            cont_idx.append(schema.continuous_fields.index(name))
        else:
            raise InvalidInputError(f"unknown field {name!r} in branch selector")
    return sorted(cat_idx), sorted(cont_idx)


def corrupt_side_info(
    rec: SideInfoRecord,
    schema: SideInfoSchema,
    mode: str,
    branch_selector: Iterable[str],
    seed: int = 0,
) -> SideInfoRecord:
    """Produce a corrupted copy of a record for ablation studies.

    random: selected categorical fields resampled uniformly over their
        vocabulary (seeded, may reproduce the original value).
    wrong: selected categorical fields deterministically replaced by the
        next vocabulary entry (cyclic shift by one), never the original.
    mask: selected categorical fields set to the reserved null id (zero
        embedding); selected continuous fields zeroed and flagged
        unknown. If every continuous field is selected the whole
        continuous branch is switched off (encoded vector forced to
        zero).

    Continuous fields in the selector are only meaningful for ``mask``
    and are ignored by ``random`` and ``wrong``, which corrupt labels.
    """
    if mode not in CORRUPTION_MODES:
        raise ConfigError(f"unknown corruption mode {mode!r}")
    schema.validate_record(rec)
    cat_idx, cont_idx = _resolve_selector(schema, branch_selector)

    if mode in ("random", "wrong") and not cat_idx:
        raise ConfigError(f"mode {mode!r} requires at least one categorical field")

    cat_ids = list(rec.categorical_ids)
    if mode == "random":
        rng = substream_rng(seed, "corrupt-random")
        for i in cat_idx:
            vocab = schema.categorical_fields[i][1]
            cat_ids[i] = int(rng.integers(0, len(vocab)))
        return replace(rec, categorical_ids=tuple(cat_ids))

    if mode == "wrong":
        for i in cat_idx:
            vocab = schema.categorical_fields[i][1]
            if len(vocab) < 2:
                raise ConfigError(
                    f"field {schema.categorical_fields[i][0]!r} has a single-entry "
                    "vocabulary; no wrong value exists"
                )
            if cat_ids[i] >= len(vocab):
                raise InvalidInputError("cannot shift a masked (null) categorical id")
            cat_ids[i] = (cat_ids[i] + 1) % len(vocab)
        return replace(rec, categorical_ids=tuple(cat_ids))

    # mask
    for i in cat_idx:
        cat_ids[i] = schema.null_id(i)
    values = list(rec.continuous_values)
    known = list(rec.continuous_known)
    for j in cont_idx:
        values[j] = 0.0
        known[j] = False
    branch_off = rec.continuous_masked or (
        len(cont_idx) == schema.n_continuous and schema.n_continuous > 0
    )
    return SideInfoRecord(
        categorical_ids=tuple(cat_ids),
        continuous_values=tuple(values),
        continuous_known=tuple(known),
        continuous_masked=branch_off,
    )
