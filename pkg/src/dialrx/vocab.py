"""Train-split vocabularies, sequence encoding, and the medication catalog.

All three domains share one dense id space (single embedding table) and are
distinguished by type ids. Ids 0 and 1 are reserved for PAD and UNK. Only
the training split may mint ids; rare tokens (count < min_count) and any
token first seen outside the train split encode to UNK.
"""

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTrainSplit, SchemaError, UnknownIngredient
from .util import atomic_write_text

PAD_ID = 0
UNK_ID = 1
DOMAIN_TYPE_IDS = {"PAD": 0, "DX": 1, "PROC": 2, "MED": 3}


@dataclass
class Vocab:
    """Per-domain token->id maps over one shared id space."""

    by_domain: dict  # domain -> {code: id}
    min_count: int = 1

    @property
    def size(self) -> int:
        return 2 + sum(len(m) for m in self.by_domain.values())

    def token_id(self, domain: str, code: str) -> int:
        return self.by_domain.get(domain, {}).get(code, UNK_ID)

    def decode(self, token_id: int):
        """Inverse lookup: id -> (domain, code); PAD/UNK map to None codes."""
        if token_id == PAD_ID:
            return ("PAD", None)
        if token_id == UNK_ID:
            return ("UNK", None)
        return self._reverse()[token_id]

    def _reverse(self):
        if not hasattr(self, "_rev"):
            self._rev = {i: (domain, code)
                         for domain, mapping in self.by_domain.items()
                         for code, i in mapping.items()}
        return self._rev

    def to_json_dict(self) -> dict:
        return {"min_count": self.min_count, "by_domain": {d: dict(m) for d, m in self.by_domain.items()}}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Vocab":
        return cls(by_domain={k: {c: int(i) for c, i in m.items()} for k, m in d["by_domain"].items()},
                   min_count=int(d["min_count"]))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_json_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def build_vocabs(train_rows, min_count: int = 1) -> Vocab:
    """Mint ids from training-split tokens only.

    Ids are assigned per domain (DX, PROC, MED in that order), within a
    domain by descending count then code, starting at 2. Tokens below
    min_count are dropped (they will encode to UNK).
    """
    train_rows = list(train_rows)
    if not train_rows:
        raise EmptyTrainSplit("cannot build vocabularies from an empty train split")
    counts = {d: Counter() for d in ("DX", "PROC", "MED")}
    for row in train_rows:
        for domain, code, _day in row.tokens:
            counts[domain][code] += 1
    by_domain = {}
    next_id = 2
    for domain in ("DX", "PROC", "MED"):
        kept = sorted((c for c, n in counts[domain].items() if n >= min_count),
                      key=lambda c: (-counts[domain][c], c))
        by_domain[domain] = {c: next_id + i for i, c in enumerate(kept)}
        next_id += len(kept)
    return Vocab(by_domain=by_domain, min_count=min_count)


@dataclass
class EncodedSequence:
    """Fixed-length arrays for one patient; mask marks non-PAD positions."""

    token_ids: np.ndarray
    type_ids: np.ndarray
    position_ids: np.ndarray
    day_offsets: np.ndarray
    mask: np.ndarray
    length: int


def encode(row, vocab: Vocab, max_len: int) -> EncodedSequence:
    """Encode one cohort row; keeps the most recent max_len tokens."""
    if max_len < 1:
        raise SchemaError("max_len must be >= 1")
    tokens = row.tokens[-max_len:] if len(row.tokens) > max_len else row.tokens
    n = len(tokens)
    token_ids = np.zeros(max_len, np.int64)
    type_ids = np.zeros(max_len, np.int64)
    day_offsets = np.zeros(max_len, np.int64)
    mask = np.zeros(max_len, np.float64)
    for i, (domain, code, day) in enumerate(tokens):
        token_ids[i] = vocab.token_id(domain, code)
        type_ids[i] = DOMAIN_TYPE_IDS[domain]
        day_offsets[i] = day
        mask[i] = 1.0
    return EncodedSequence(
        token_ids=token_ids,
        type_ids=type_ids,
        position_ids=np.arange(max_len, dtype=np.int64),
        day_offsets=day_offsets,
        mask=mask,
        length=n,
    )


@dataclass
class MedCatalog:
    """Ingredient -> medication codes, with a category per ingredient."""

    codes_by_ingredient: dict = field(default_factory=dict)  # ingredient -> frozenset of codes
    category_by_ingredient: dict = field(default_factory=dict)  # ingredient -> category

    def __post_init__(self):
        for ing, codes in self.codes_by_ingredient.items():
            if not codes:
                raise SchemaError(f"ingredient {ing!r} has no codes")
            self.codes_by_ingredient[ing] = frozenset(codes)

    @property
    def ingredients(self):
        return sorted(self.codes_by_ingredient)

    @property
    def categories(self):
        return sorted(set(self.category_by_ingredient.values()))


def ingredient_codes(catalog: MedCatalog, name: str) -> frozenset:
    """Code set for an ingredient, or the union over a category's members."""
    if name in catalog.codes_by_ingredient:
        return catalog.codes_by_ingredient[name]
    members = [i for i, c in catalog.category_by_ingredient.items() if c == name]
    if members:
        out = frozenset()
        for ing in members:
            out |= catalog.codes_by_ingredient[ing]
        return out
    raise UnknownIngredient(f"{name!r} is neither an ingredient nor a category")


def read_catalog_csv(path) -> MedCatalog:
    codes = {}
    cats = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        want = ["ingredient", "category", "code"]
        if reader.fieldnames != want:
            raise SchemaError(f"catalog header {reader.fieldnames} != {want}")
        for r in reader:
            ing = r["ingredient"]
            codes.setdefault(ing, set()).add(r["code"])
            prev = cats.setdefault(ing, r["category"])
            if prev != r["category"]:
                raise SchemaError(f"ingredient {ing!r} listed under two categories")
    return MedCatalog(codes_by_ingredient=codes, category_by_ingredient=cats)


def write_catalog_csv(catalog: MedCatalog, path, meta: str = None) -> None:
    buf = io.StringIO()
    if meta:  # provenance comment, e.g. config hash and seed
        buf.write(f"# {meta}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ingredient", "category", "code"])
    for ing in catalog.ingredients:
        for code in sorted(catalog.codes_by_ingredient[ing]):
            w.writerow([ing, catalog.category_by_ingredient[ing], code])
    atomic_write_text(path, buf.getvalue())
