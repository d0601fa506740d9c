"""Training loop, imbalance handling, evaluation metrics, and a linear baseline.

Training samples minibatches (optionally weighted toward the rare class),
augments positive sequences, and keeps the parameters from the epoch with the
best validation PR-AUC. Metrics are exact implementations: rank-based ROC AUC
with half-credit ties, step-wise average precision, Brier score, equal-width
calibration bins, and exhaustive F1 threshold selection. The logistic baseline
shares its IRLS fitter with the propensity model used by the causal module.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import model as md
from . import numerics as nm
from .errors import (
    Diverged,
    EmptyCohort,
    InvalidConfig,
    InvalidHyper,
    NoFeasibleThreshold,
    NonFinite,
    NoPositives,
    SingleClass,
    SingularSystem,
)
from .util import atomic_write_text, canonical_json, rng_for
from .vocab import UNK_ID, encode

SAMPLERS = ("uniform", "weighted")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    sampler: str = "weighted"
    token_dropout_rate: float = 0.0
    mask_rate: float = 0.0
    shuffle_window: int = 0  # adjacent same-day swaps per run; 0 disables
    loss_hyper: dict = field(default_factory=dict)
    patience: int = 5
    augment_positives_only: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidConfig("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 0:
            raise InvalidConfig("batch_size >= 1, epochs >= 0, patience >= 0")
        for name in ("token_dropout_rate", "mask_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1]")
        if self.shuffle_window < 0:
            raise InvalidConfig("shuffle_window must be >= 0")
        if self.sampler not in SAMPLERS:
            raise InvalidConfig(f"sampler must be one of {SAMPLERS}")

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Features and batching
# ---------------------------------------------------------------------------


@dataclass
class FeatureScaler:
    """Per-column standardization fitted on the training split."""

    mean: np.ndarray
    sd: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.sd

    def to_json_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_json_dict(cls, d) -> "FeatureScaler":
        return cls(mean=np.asarray(d["mean"], float), sd=np.asarray(d["sd"], float))


def raw_features(rows) -> np.ndarray:
    """Lab trend features plus the three domain utilization counts, [n, 12]."""
    out = np.empty((len(rows), 12))
    for i, row in enumerate(rows):
        out[i, :9] = row.lab_features
        out[i, 9:] = (row.n_dx, row.n_proc, row.n_med)
    return out


def fit_scaler(rows) -> FeatureScaler:
    x = raw_features(rows)
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0  # constant columns pass through unscaled
    return FeatureScaler(mean=mean, sd=sd)


def exposure_flags(rows, codes) -> np.ndarray:
    """1.0 where the row's in-window MED codes intersect ``codes``."""
    codes = frozenset(codes)
    return np.array([1.0 if row.exposures & codes else 0.0 for row in rows])


def labels_of(rows) -> np.ndarray:
    return np.array([float(row.label) for row in rows])


# ---------------------------------------------------------------------------
# Sampling and augmentation
# ---------------------------------------------------------------------------


def weighted_sampler(labels, seed: int):
    """Infinite index stream with per-class weight proportional to 1/frequency."""
    y = np.asarray(labels, dtype=np.float64)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("weighted sampling needs both classes")
    w = np.where(y == 1.0, 1.0 / n1, 1.0 / n0)
    p = w / w.sum()
    rng = rng_for(seed, "sampler")

    def stream():
        while True:
            for i in rng.choice(y.size, size=4096, p=p):
                yield int(i)

    return stream()


def uniform_sampler(labels, seed: int):
    """Infinite index stream of epoch-wise shuffles without replacement."""
    n = len(labels)
    rng = rng_for(seed, "sampler")

    def stream():
        while True:
            for i in rng.permutation(n):
                yield int(i)

    return stream()


def augment(seq, config: TrainConfig, seed: int):
    """Token dropout, UNK masking, and adjacent same-day swaps on one sequence.

    Day offsets keep their cross-day order; only the dropped tokens leave the
    day-offset multiset. With all rates zero this is the identity.
    """
    rng = rng_for(seed, "augment")
    max_len = seq.token_ids.size
    n = seq.length
    ids = seq.token_ids[:n].copy()
    types = seq.type_ids[:n].copy()
    days = seq.day_offsets[:n].copy()

    if config.token_dropout_rate > 0 and n:
        keep = rng.random(n) >= config.token_dropout_rate
        ids, types, days = ids[keep], types[keep], days[keep]
        n = ids.size
    if config.mask_rate > 0 and n:
        hit = rng.random(n) < config.mask_rate
        ids[hit] = UNK_ID
    if config.shuffle_window > 0 and n >= 2:
        starts = np.flatnonzero(np.diff(days) != 0) + 1
        bounds = np.concatenate([[0], starts, [n]])
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            run = hi - lo
            if run < 2:
                continue
            for _ in range(min(config.shuffle_window, run - 1)):
                j = int(rng.integers(lo, hi - 1))
                for arr in (ids, types, days):
                    arr[[j, j + 1]] = arr[[j + 1, j]]

    from .vocab import EncodedSequence

    token_ids = np.zeros(max_len, dtype=np.int64)
    type_ids = np.zeros(max_len, dtype=np.int64)
    day_offsets = np.zeros(max_len, dtype=np.int64)
    mask = np.zeros(max_len)
    token_ids[:n], type_ids[:n], day_offsets[:n], mask[:n] = ids, types, days, 1.0
    return EncodedSequence(
        token_ids=token_ids,
        type_ids=type_ids,
        position_ids=np.arange(max_len, dtype=np.int64),
        day_offsets=day_offsets,
        mask=mask,
        length=int(n),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise InvalidHyper("labels must be binary")
    return y


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted half."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("ROC AUC needs both classes")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1.0].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


@dataclass
class PRCurve:
    """Precision–recall points at each distinct score threshold, descending."""

    thresholds: np.ndarray
    precisions: np.ndarray
    recalls: np.ndarray
    pr_auc: float


def pr_metrics(scores, labels) -> PRCurve:
    """Average precision: sum over thresholds of (delta recall) * precision."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    n1 = int(y.sum())
    if n1 == 0:
        raise NoPositives("PR metrics need at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1.0 - y_sorted)
    last = np.flatnonzero(np.diff(s_sorted, append=-np.inf) != 0.0)  # end of tie group
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n1
    delta = np.diff(recall, prepend=0.0)
    return PRCurve(
        thresholds=s_sorted[last],
        precisions=precision,
        recalls=recall,
        pr_auc=float(np.sum(delta * precision)),
    )


def _f1_table(scores, labels):
    """Threshold candidates (distinct scores + inf) with their F1 and recall."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    n1 = int(y.sum())
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1.0 - y_sorted)
    last = np.flatnonzero(np.diff(s_sorted, append=-np.inf) != 0.0)
    thresholds = np.concatenate([s_sorted[last], [np.inf]])
    tp = np.concatenate([tp[last], [0.0]])
    fp = np.concatenate([fp[last], [0.0]])
    fn = n1 - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(denom), where=denom > 0)
    recall = tp / n1 if n1 else np.zeros_like(tp)
    return thresholds, f1, recall, n1


def select_threshold(scores, labels, min_recall: float | None = None) -> float:
    """Distinct-score threshold maximizing F1; ties resolve to the higher one."""
    thresholds, f1, recall, n1 = _f1_table(scores, labels)
    if n1 == 0:
        raise NoFeasibleThreshold("no positives to select a threshold for")
    feasible = np.ones(thresholds.size, dtype=bool)
    if min_recall is not None:
        feasible = recall >= min_recall
        if not feasible.any():
            raise NoFeasibleThreshold(f"no threshold reaches recall {min_recall}")
    best = None
    for i in np.flatnonzero(feasible):
        if best is None or f1[i] > f1[best] or (f1[i] == f1[best] and thresholds[i] > thresholds[best]):
            best = i
    return float(thresholds[best])


def brier(scores, labels) -> float:
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    return float(np.mean((s - y) ** 2))


@dataclass
class CalibrationBin:
    mean_score: float | None
    event_rate: float | None
    count: int


def calibration_curve(scores, labels, n_bins: int = 10):
    """Equal-width bins on [0,1]; a score of exactly 1.0 lands in the last bin."""
    if n_bins < 1:
        raise InvalidHyper("n_bins must be >= 1")
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    idx = np.minimum((s * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    score_sum = np.bincount(idx, weights=s, minlength=n_bins)
    event_sum = np.bincount(idx, weights=y, minlength=n_bins)
    bins = []
    for b in range(n_bins):
        if counts[b]:
            bins.append(
                CalibrationBin(
                    mean_score=float(score_sum[b] / counts[b]),
                    event_rate=float(event_sum[b] / counts[b]),
                    count=int(counts[b]),
                )
            )
        else:
            bins.append(CalibrationBin(mean_score=None, event_rate=None, count=0))
    return bins


@dataclass
class MetricsReport:
    auc: float
    pr_auc: float
    precision: float
    recall: float
    f1: float
    brier: float
    threshold: float
    calibration: list
    confusion: dict
    n: int

    def to_json_dict(self) -> dict:
        return {
            "auc": self.auc,
            "pr_auc": self.pr_auc,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "brier": self.brier,
            "threshold": self.threshold,
            "calibration": [
                {"mean_score": b.mean_score, "event_rate": b.event_rate, "count": b.count}
                for b in self.calibration
            ],
            "confusion": dict(self.confusion),
            "n": self.n,
        }


def evaluate(scores, labels, threshold: float, n_bins: int = 10) -> MetricsReport:
    """Full metric panel at a fixed decision threshold."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1.0)))
    fp = int(np.sum(pred & (y == 0.0)))
    fn = int(np.sum(~pred & (y == 1.0)))
    tn = int(np.sum(~pred & (y == 0.0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(
        auc=roc_auc(s, y),
        pr_auc=pr_metrics(s, y).pr_auc,
        precision=precision,
        recall=recall,
        f1=f1,
        brier=brier(s, y),
        threshold=float(threshold),
        calibration=calibration_curve(s, y, n_bins),
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        n=int(y.size),
    )


# ---------------------------------------------------------------------------
# Shared logistic fitter (IRLS); also used for propensity models
# ---------------------------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def fit_logistic_irls(
    x: np.ndarray,
    y: np.ndarray,
    l2: float = 1e-4,
    max_iter: int = 100,
    tol: float = 1e-10,
    sample_weight=None,
    beta0=None,
) -> np.ndarray:
    """Ridge logistic regression via iteratively reweighted least squares.

    Returns coefficients with the unpenalized intercept first. A singular
    normal system retries with a 10x larger ridge a few times before failing.
    ``beta0`` warm-starts the iterations (e.g. bootstrap refits near a
    full-data solution); the fixed point does not depend on it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidHyper(f"design {x.shape} incompatible with labels {y.shape}")
    n = x.shape[0]
    xd = np.concatenate([np.ones((n, 1)), x], axis=1)
    k = xd.shape[1]
    sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, float)
    ridge_mask = np.ones(k)
    ridge_mask[0] = 0.0

    if beta0 is not None:
        beta = np.asarray(beta0, dtype=np.float64).copy()
        if beta.shape != (k,):
            raise InvalidHyper(f"beta0 shape {beta.shape} != ({k},)")
    else:
        beta = np.zeros(k)
        p_bar = min(max(y.mean(), 1e-6), 1.0 - 1e-6)
        beta[0] = math.log(p_bar / (1.0 - p_bar))
    lam = float(l2)
    for attempt in range(6):
        try:
            b = beta.copy()
            # Convergence is judged on the penalized deviance, not on the
            # coefficients: with near-collinear columns the flat directions
            # wander at round-off scale and a coefficient test never settles.
            dev_prev = math.inf
            for _ in range(max_iter):
                eta = np.clip(xd @ b, -30.0, 30.0)
                p = _sigmoid(eta)
                w = np.maximum(p * (1.0 - p), 1e-12) * sw
                z = eta + (y - p) / np.maximum(p * (1.0 - p), 1e-12)
                a = (xd * w[:, None]).T @ xd + lam * np.diag(ridge_mask)
                rhs = (xd * w[:, None]).T @ z
                new = np.linalg.solve(a, rhs)
                if not np.all(np.isfinite(new)):
                    raise np.linalg.LinAlgError("non-finite update")
                delta = np.max(np.abs(new - b))
                b = new
                if delta < tol:
                    break
                eta_new = np.clip(xd @ b, -30.0, 30.0)
                dev = float(
                    -2.0 * np.sum(sw * (y * eta_new - np.logaddexp(0.0, eta_new)))
                    + lam * float(np.dot(b * ridge_mask, b))
                )
                if abs(dev - dev_prev) <= 1e-9 * (abs(dev) + 1.0):
                    break
                dev_prev = dev
            return b
        except np.linalg.LinAlgError:
            lam = max(lam, 1e-8) * 10.0  # jitter the ridge and retry
    raise SingularSystem("IRLS normal equations stayed singular after ridge jitter")


def predict_logistic(beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xd = np.concatenate([np.ones((x.shape[0], 1)), x], axis=1)
    if xd.shape[1] != beta.shape[0]:
        raise InvalidHyper(f"{xd.shape[1]} columns vs {beta.shape[0]} coefficients")
    return _sigmoid(np.clip(xd @ beta, -30.0, 30.0))


# ---------------------------------------------------------------------------
# Model scoring and training
# ---------------------------------------------------------------------------


def score_rows(params, model_cfg, rows, vocab, scaler, t=None, batch_size: int = 256) -> np.ndarray:
    """Risk score per row: factual composition when t is given, else y_hat."""
    if not rows:
        return np.zeros(0)
    feats = scaler.transform(raw_features(rows))
    encoded = [encode(row, vocab, model_cfg.max_len) for row in rows]
    out = np.empty(len(rows))
    for lo in range(0, len(rows), batch_size):
        hi = min(lo + batch_size, len(rows))
        batch = md.make_batch(encoded[lo:hi], feats[lo:hi])
        outs = md.forward(batch, params, model_cfg, train_mode=False)
        if t is not None:
            out[lo:hi] = md.factual(np.asarray(t)[lo:hi], outs).data[:, 0]
        else:
            out[lo:hi] = outs.y_hat.data[:, 0]
    return out


@dataclass
class TrainResult:
    params: dict
    log: list
    best_epoch: int | None
    scaler: FeatureScaler


def _copy_params(params):
    return {k: nm.parameter(p.data.copy()) for k, p in params.items()}


def train(train_rows, val_rows, vocab, model_cfg, train_cfg: TrainConfig, t_codes=None) -> TrainResult:
    """Minibatch training; returns parameters from the best validation epoch.

    ``t_codes`` is the MED code set defining the treatment flag for the
    propensity and potential-outcome heads; required when alpha > 0.
    """
    if not train_rows or not val_rows:
        raise EmptyCohort("training requires non-empty train and validation splits")
    if model_cfg.alpha > 0 and t_codes is None:
        raise InvalidHyper("t_codes required when the treatment loss is active")

    scaler = fit_scaler(train_rows)
    y_train = labels_of(train_rows)
    y_val = labels_of(val_rows)
    if y_val.sum() == 0:
        raise NoPositives("validation split has no positives")
    t_train = exposure_flags(train_rows, t_codes) if t_codes is not None else np.zeros(len(train_rows))
    t_val = exposure_flags(val_rows, t_codes) if t_codes is not None else None
    feats_train = scaler.transform(raw_features(train_rows))
    encoded = [encode(row, vocab, model_cfg.max_len) for row in train_rows]

    params = md.init_params(model_cfg, train_cfg.seed)
    state = nm.init_adam(params)
    augment_on = (
        train_cfg.token_dropout_rate > 0 or train_cfg.mask_rate > 0 or train_cfg.shuffle_window > 0
    )
    sampler = (
        weighted_sampler(y_train, train_cfg.seed)
        if train_cfg.sampler == "weighted"
        else uniform_sampler(y_train, train_cfg.seed)
    )
    steps = max(1, math.ceil(len(train_rows) / train_cfg.batch_size))

    log = []
    best = None  # (pr_auc, epoch, params)
    wait = 0
    use_t = model_cfg.alpha > 0
    for epoch in range(train_cfg.epochs):
        losses = []
        for step in range(steps):
            idx = [next(sampler) for _ in range(train_cfg.batch_size)]
            seqs = []
            for pos, i in enumerate(idx):
                seq = encoded[i]
                if augment_on and (y_train[i] == 1.0 or not train_cfg.augment_positives_only):
                    seq = augment(seq, train_cfg, rng_for(train_cfg.seed, "aug", epoch, step, pos).integers(2**62))
                seqs.append(seq)
            batch = md.make_batch(seqs, feats_train[idx], y=y_train[idx], t=t_train[idx])
            try:
                outs = md.forward(
                    batch, params, model_cfg, train_mode=True, rng=rng_for(train_cfg.seed, "drop", epoch, step)
                )
                weights = dict(train_cfg.loss_hyper)
                if model_cfg.l2_lambda > 0:
                    weights["params"] = params
                loss = md.combined_loss(outs, batch.y, batch.t if use_t else None, model_cfg, weights)
            except NonFinite as exc:
                raise Diverged(f"non-finite values at epoch {epoch} step {step}") from exc
            value = loss.data.item()
            if not np.isfinite(value):
                raise Diverged(f"non-finite loss at epoch {epoch} step {step}")
            losses.append(value)
            nm.zero_grads(params)
            nm.backward(loss, params)
            nm.adam_step(params, {k: p.grad for k, p in params.items()}, state, lr=train_cfg.lr)

        val_scores = score_rows(params, model_cfg, val_rows, vocab, scaler, t=t_val if use_t else None)
        val_pr = pr_metrics(val_scores, y_val).pr_auc
        val_auc = roc_auc(val_scores, y_val)
        log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_pr_auc": val_pr,
                "val_auc": val_auc,
            }
        )
        if best is None or val_pr > best[0]:
            best = (val_pr, epoch, _copy_params(params))
            wait = 0
        else:
            wait += 1
            if wait > train_cfg.patience:
                break

    if best is None:  # zero epochs: initial parameters pass through
        return TrainResult(params=params, log=log, best_epoch=None, scaler=scaler)
    return TrainResult(params=best[2], log=log, best_epoch=best[1], scaler=scaler)


# ---------------------------------------------------------------------------
# Logistic baseline
# ---------------------------------------------------------------------------


def bag_of_codes(rows, vocab) -> np.ndarray:
    """Token-count design matrix over non-PAD vocabulary ids, [n, V-1]."""
    out = np.zeros((len(rows), vocab.size - 1))
    for i, row in enumerate(rows):
        for domain, code, _day in row.tokens:
            out[i, vocab.token_id(domain, code) - 1] += 1.0
    return out


def logistic_baseline(
    train_rows,
    val_rows,
    test_rows,
    vocab,
    *,
    l2: float = 1e-3,
    include_tokens: bool = True,
    include_scalars: bool = True,
    min_recall: float | None = None,
    n_bins: int = 10,
) -> MetricsReport:
    """Bag-of-codes + scalar-feature ridge logistic model, evaluated like the
    sequence model: threshold picked on validation, metrics on test."""
    if not train_rows or not val_rows or not test_rows:
        raise EmptyCohort("baseline requires non-empty splits")

    def raw(rows):
        parts = []
        if include_tokens:
            parts.append(bag_of_codes(rows, vocab))
        if include_scalars:
            parts.append(raw_features(rows))
        return np.concatenate(parts, axis=1) if parts else np.zeros((len(rows), 0))

    raw_train = raw(train_rows)
    mean = raw_train.mean(axis=0) if raw_train.size else np.zeros(raw_train.shape[1])
    sd = raw_train.std(axis=0) if raw_train.size else np.ones(raw_train.shape[1])
    sd = np.where(sd < 1e-12, 1.0, sd)

    beta = fit_logistic_irls((raw_train - mean) / sd, labels_of(train_rows), l2=l2)
    val_scores = predict_logistic(beta, (raw(val_rows) - mean) / sd)
    test_scores = predict_logistic(beta, (raw(test_rows) - mean) / sd)
    threshold = select_threshold(val_scores, labels_of(val_rows), min_recall=min_recall)
    return evaluate(test_scores, labels_of(test_rows), threshold, n_bins=n_bins)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_metrics_json(report: MetricsReport, path) -> None:
    atomic_write_text(path, canonical_json(report.to_json_dict()))


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def write_epoch_log_csv(log, path) -> None:
    _write_csv(
        path,
        ["epoch", "train_loss", "val_pr_auc", "val_auc"],
        [[e["epoch"], repr(e["train_loss"]), repr(e["val_pr_auc"]), repr(e["val_auc"])] for e in log],
    )


def write_pr_curve_csv(curve: PRCurve, path) -> None:
    _write_csv(
        path,
        ["threshold", "precision", "recall"],
        [
            [repr(float(t)), repr(float(p)), repr(float(r))]
            for t, p, r in zip(curve.thresholds, curve.precisions, curve.recalls)
        ],
    )


def write_calibration_csv(bins, path) -> None:
    _write_csv(
        path,
        ["bin", "mean_score", "event_rate", "count"],
        [
            [i, "" if b.mean_score is None else repr(b.mean_score), "" if b.event_rate is None else repr(b.event_rate), b.count]
            for i, b in enumerate(bins)
        ],
    )
