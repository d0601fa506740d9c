"""Counterfactual exposure editing and model-based treatment-effect estimates.

An ingredient's effect is read off a trained model by scoring every patient
twice: once with the ingredient's tokens inserted ("treated" scenario) and
once with them removed and replaced by padding ("untreated"). The ATE is the
mean risk difference across all patients; exposure support and nested-fold
stability statistics are reported alongside.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import model as md
from .errors import EmptyCohort, FoldTooSmall, InvalidConfig
from .train_eval import FeatureScaler, raw_features
from .util import atomic_write_text
from .vocab import DOMAIN_TYPE_IDS, PAD_ID, UNK_ID, EncodedSequence, encode, ingredient_codes

EDIT_MODES = ("remove", "insert")


@dataclass(frozen=True)
class ExposureEdit:
    codes: frozenset
    mode: str

    def __post_init__(self):
        if not self.codes:
            raise InvalidConfig("edit needs a non-empty code set")
        if self.mode not in EDIT_MODES:
            raise InvalidConfig(f"edit mode must be one of {EDIT_MODES}")


@dataclass
class EditResult:
    seq: EncodedSequence
    dropped_oldest: bool = False
    changed: bool = False


def _target_ids(vocab, codes):
    """Vocabulary ids for the target MED codes; out-of-vocab codes are inert."""
    ids = {vocab.token_id("MED", c) for c in codes}
    ids.discard(PAD_ID)
    ids.discard(UNK_ID)  # editing UNK would touch unrelated rare tokens
    return sorted(ids)


def apply_edit(seq: EncodedSequence, edit: ExposureEdit, vocab, obs_days: int) -> EditResult:
    """Remove target tokens to PAD, or append one canonical target token.

    Remove blanks every position whose token id is in the target set and
    leaves all other positions byte-identical. Insert is the identity when a
    target token is already present; otherwise the lowest-id target code is
    appended at day obs_days−1, dropping the oldest token if the sequence is
    already full (reported via ``dropped_oldest``).
    """
    ids = _target_ids(vocab, edit.codes)
    token_ids = seq.token_ids
    if not ids:
        return EditResult(seq=seq)

    if edit.mode == "remove":
        hit = np.isin(token_ids, ids) & (seq.mask == 1.0)
        if not hit.any():
            return EditResult(seq=seq)
        new_tokens = token_ids.copy()
        new_types = seq.type_ids.copy()
        new_days = seq.day_offsets.copy()
        new_mask = seq.mask.copy()
        new_tokens[hit] = PAD_ID
        new_types[hit] = 0
        new_days[hit] = 0
        new_mask[hit] = 0.0
        return EditResult(
            seq=EncodedSequence(
                token_ids=new_tokens,
                type_ids=new_types,
                position_ids=seq.position_ids,
                day_offsets=new_days,
                mask=new_mask,
                length=int(new_mask.sum()),
            ),
            changed=True,
        )

    # insert
    present = np.isin(token_ids, ids) & (seq.mask == 1.0)
    if present.any():
        return EditResult(seq=seq)
    max_len = token_ids.size
    real = np.flatnonzero(seq.mask == 1.0)
    slot = int(real[-1]) + 1 if real.size else 0
    new_tokens = token_ids.copy()
    new_types = seq.type_ids.copy()
    new_days = seq.day_offsets.copy()
    new_mask = seq.mask.copy()
    dropped = False
    if slot >= max_len:  # full: drop the oldest token, shift left, append
        new_tokens[:-1] = new_tokens[1:]
        new_types[:-1] = new_types[1:]
        new_days[:-1] = new_days[1:]
        new_mask[:-1] = new_mask[1:]
        slot = max_len - 1
        dropped = True
    new_tokens[slot] = ids[0]
    new_types[slot] = DOMAIN_TYPE_IDS["MED"]
    new_days[slot] = obs_days - 1
    new_mask[slot] = 1.0
    return EditResult(
        seq=EncodedSequence(
            token_ids=new_tokens,
            type_ids=new_types,
            position_ids=seq.position_ids,
            day_offsets=new_days,
            mask=new_mask,
            length=int(new_mask.sum()),
        ),
        dropped_oldest=dropped,
        changed=True,
    )


# ---------------------------------------------------------------------------
# Model bundle and scenario scoring
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    """Everything needed to score new rows: params, config, vocab, scaler."""

    params: dict
    config: md.ModelConfig
    vocab: object
    scaler: FeatureScaler


def _scenario_scores(model: TrainedModel, seqs, feats, t_value, batch_size: int) -> np.ndarray:
    """Risk per sequence under a fixed treatment scenario.

    Outcome-only models read the y head; joint models read the potential
    outcome selected by the scenario flag.
    """
    out = np.empty(len(seqs))
    use_t = model.config.alpha > 0
    for lo in range(0, len(seqs), batch_size):
        hi = min(lo + batch_size, len(seqs))
        batch = md.make_batch(seqs[lo:hi], feats[lo:hi])
        outs = md.forward(batch, model.params, model.config, train_mode=False)
        if use_t:
            head = outs.y1_hat if t_value == 1 else outs.y0_hat
            out[lo:hi] = head.data[:, 0]
        else:
            out[lo:hi] = outs.y_hat.data[:, 0]
    return out


@dataclass
class AteEstimate:
    ingredient: str
    ate: float
    direction: str
    support: int
    n: int
    fold_mean: float | None = None
    fold_sd: float | None = None
    fold_min: float | None = None
    fold_max: float | None = None

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def direction_of(value: float, null_band: float = 1e-4) -> str:
    if value < -null_band:
        return "protective"
    if value > null_band:
        return "risk-increasing"
    return "null"


def patient_risk_differences(
    model: TrainedModel, rows, ingredient: str, catalog, batch_size: int = 256
) -> np.ndarray:
    """risk(insert) − risk(remove) per patient, in cohort order."""
    if not rows:
        raise EmptyCohort("no rows to estimate an effect on")
    codes = ingredient_codes(catalog, ingredient)
    edit_in = ExposureEdit(codes=frozenset(codes), mode="insert")
    edit_out = ExposureEdit(codes=frozenset(codes), mode="remove")
    obs = model.config.obs_days
    base = [encode(row, model.vocab, model.config.max_len) for row in rows]
    treated_seqs = [apply_edit(s, edit_in, model.vocab, obs).seq for s in base]
    control_seqs = [apply_edit(s, edit_out, model.vocab, obs).seq for s in base]
    feats = model.scaler.transform(raw_features(rows))
    risk_t = _scenario_scores(model, treated_seqs, feats, 1, batch_size)
    risk_u = _scenario_scores(model, control_seqs, feats, 0, batch_size)
    return risk_t - risk_u


def support_count(rows, ingredient: str, catalog, vocab) -> int:
    """Patients whose observed exposures include an in-vocab ingredient code."""
    codes = frozenset(
        c for c in ingredient_codes(catalog, ingredient) if vocab.token_id("MED", c) > UNK_ID
    )
    return sum(1 for row in rows if row.exposures & codes)


def ate(
    model: TrainedModel,
    rows,
    ingredient: str,
    catalog,
    *,
    batch_size: int = 256,
    null_band: float = 1e-4,
) -> AteEstimate:
    """Mean counterfactual risk difference for one ingredient over all rows."""
    diffs = patient_risk_differences(model, rows, ingredient, catalog, batch_size)
    value = float(math.fsum(diffs) / diffs.size)
    return AteEstimate(
        ingredient=ingredient,
        ate=value,
        direction=direction_of(value, null_band),
        support=support_count(rows, ingredient, catalog, model.vocab),
        n=len(rows),
    )


def nested_fold_ate(
    model_factory,
    rows,
    k: int,
    ingredient: str,
    catalog,
    *,
    batch_size: int = 256,
    null_band: float = 1e-4,
) -> AteEstimate:
    """Per-fold effects on a K-way patient partition, plus the pooled estimate.

    ``model_factory(fold_index)`` supplies the TrainedModel used for that
    fold; pass a constant factory to assess fold stability of one model.
    """
    if k < 2:
        raise InvalidConfig("nested folds need k >= 2")
    if not rows:
        raise EmptyCohort("no rows to fold")
    if k > len(rows):
        raise FoldTooSmall(f"k={k} exceeds {len(rows)} patients")
    bounds = np.linspace(0, len(rows), k + 1).astype(int)
    fold_ates = []
    pooled = []
    support = 0
    for fold in range(k):
        fold_rows = rows[bounds[fold] : bounds[fold + 1]]
        model = model_factory(fold)
        diffs = patient_risk_differences(model, fold_rows, ingredient, catalog, batch_size)
        fold_ates.append(float(math.fsum(diffs) / diffs.size))
        pooled.extend(diffs.tolist())
        support += support_count(fold_rows, ingredient, catalog, model.vocab)
    value = float(math.fsum(pooled) / len(pooled))
    sd = float(np.std(fold_ates, ddof=1))
    return AteEstimate(
        ingredient=ingredient,
        ate=value,
        direction=direction_of(value, null_band),
        support=support,
        n=len(rows),
        fold_mean=float(np.mean(fold_ates)),
        fold_sd=sd,
        fold_min=float(min(fold_ates)),
        fold_max=float(max(fold_ates)),
    )


EFFECTS_HEADER = ["ingredient", "ate", "direction", "support", "fold_mean", "fold_sd", "fold_min", "fold_max"]


def write_effects_csv(estimates, path, meta: str = None) -> None:
    buf = io.StringIO()
    if meta:  # provenance comment, e.g. config hash and seed
        buf.write(f"# {meta}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EFFECTS_HEADER)
    for e in estimates:
        writer.writerow(
            [
                e.ingredient,
                repr(e.ate),
                e.direction,
                e.support,
                "" if e.fold_mean is None else repr(e.fold_mean),
                "" if e.fold_sd is None else repr(e.fold_sd),
                "" if e.fold_min is None else repr(e.fold_min),
                "" if e.fold_max is None else repr(e.fold_max),
            ]
        )
    atomic_write_text(path, buf.getvalue())


def read_effects_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        if header != EFFECTS_HEADER:
            raise InvalidConfig(f"unexpected effects header: {header}")
        out = []
        for row in reader:
            out.append(
                AteEstimate(
                    ingredient=row[0],
                    ate=float(row[1]),
                    direction=row[2],
                    support=int(row[3]),
                    n=0,
                    fold_mean=float(row[4]) if row[4] else None,
                    fold_sd=float(row[5]) if row[5] else None,
                    fold_min=float(row[6]) if row[6] else None,
                    fold_max=float(row[7]) if row[7] else None,
                )
            )
    return out
