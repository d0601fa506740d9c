"""Sequence encoder with outcome, propensity, and potential-outcome heads.

Embeddings (token + type + position + 7-day time bucket) feed a pre-norm
transformer encoder. The encoded sequence is mean-pooled over non-PAD
positions, concatenated with projected scalar features, passed through a
shared trunk, and read out by four sigmoid heads: factual outcome y_hat,
propensity t_hat, and the two potential outcomes y0_hat / y1_hat. The
factual composition is y_t = t*y1 + (1-t)*y0 and the training loss is
L = L_y + alpha * L_t + lambda * sum(theta^2).
"""

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import CheckpointMismatch, InvalidConfig, InvalidHyper, ShapeMismatch
from .util import canonical_json, rng_for

LOSS_KINDS = ("weighted-bce", "focal", "class-balanced")


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    hidden_dim: int = 128
    n_heads: int = 4
    dropout: float = 0.1
    max_len: int = 64
    feature_dim: int = 12
    alpha: float = 1.0  # treatment-loss weight
    l2_lambda: float = 0.0
    loss_kind: str = "weighted-bce"
    recency_tau: float | None = None
    obs_days: int = 90  # sizes the time-bucket table and recency reference

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidConfig("vocab_size must include PAD and UNK")
        if self.hidden_dim % self.n_heads != 0:
            raise InvalidConfig("hidden_dim must be divisible by n_heads")
        if self.alpha < 0 or self.l2_lambda < 0:
            raise InvalidConfig("alpha and l2_lambda must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidConfig(f"loss_kind must be one of {LOSS_KINDS}")
        if self.max_len < 1 or self.n_layers < 1 or self.feature_dim < 0:
            raise InvalidConfig("max_len and n_layers must be >= 1, feature_dim >= 0")
        if self.recency_tau is not None and self.recency_tau <= 0:
            raise InvalidConfig("recency_tau must be positive when set")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def n_time_buckets(self) -> int:
        return self.obs_days // 7 + 1

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Batch:
    """Arrays for one minibatch; sequences padded to config.max_len."""

    token_ids: np.ndarray  # [B, T] int
    type_ids: np.ndarray  # [B, T] int
    day_offsets: np.ndarray  # [B, T] int
    mask: np.ndarray  # [B, T] float, 1 on real tokens
    features: np.ndarray  # [B, F] float
    y: np.ndarray | None = None  # [B] binary outcome
    t: np.ndarray | None = None  # [B] binary treatment

    @property
    def size(self) -> int:
        return int(self.token_ids.shape[0])


def make_batch(encoded, features, y=None, t=None) -> Batch:
    """Stack EncodedSequence objects and per-row scalar features."""
    return Batch(
        token_ids=np.stack([e.token_ids for e in encoded]),
        type_ids=np.stack([e.type_ids for e in encoded]),
        day_offsets=np.stack([e.day_offsets for e in encoded]),
        mask=np.stack([e.mask for e in encoded]).astype(np.float64),
        features=np.asarray(features, dtype=np.float64),
        y=None if y is None else np.asarray(y, dtype=np.float64),
        t=None if t is None else np.asarray(t, dtype=np.float64),
    )


@dataclass
class HeadOutputs:
    """Per-patient probabilities from the four heads, each [B, 1]."""

    y_hat: nm.Tensor
    t_hat: nm.Tensor
    y0_hat: nm.Tensor
    y1_hat: nm.Tensor


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_params(config: ModelConfig, seed: int) -> dict:
    """Named parameter tensors; embeddings N(0, 0.02), matrices Xavier."""
    params = {}

    def emb(name, rows, cols):
        rng = rng_for(seed, "init", name)
        params[name] = nm.parameter(0.02 * rng.standard_normal((rows, cols)))

    def mat(name, rows, cols):
        rng = rng_for(seed, "init", name)
        std = math.sqrt(2.0 / (rows + cols))
        params[name] = nm.parameter(std * rng.standard_normal((rows, cols)))

    def vec(name, size, value=0.0):
        params[name] = nm.parameter(np.full(size, value))

    h, hd = config.hidden_dim, config.head_dim
    emb("tok_emb", config.vocab_size, h)
    emb("type_emb", 4, h)
    emb("pos_emb", config.max_len, h)
    emb("time_emb", config.n_time_buckets, h)
    # PAD embedding row stays zero so padding is inert from step one.
    params["tok_emb"].data[0] = 0.0

    for l in range(config.n_layers):
        vec(f"l{l}.ln1.g", h, 1.0)
        vec(f"l{l}.ln1.b", h)
        for head in range(config.n_heads):
            mat(f"l{l}.q{head}", h, hd)
            mat(f"l{l}.k{head}", h, hd)
            mat(f"l{l}.v{head}", h, hd)
        mat(f"l{l}.attn_out", h, h)
        vec(f"l{l}.attn_out_b", h)
        vec(f"l{l}.ln2.g", h, 1.0)
        vec(f"l{l}.ln2.b", h)
        mat(f"l{l}.ff1", h, 4 * h)
        vec(f"l{l}.ff1_b", 4 * h)
        mat(f"l{l}.ff2", 4 * h, h)
        vec(f"l{l}.ff2_b", h)

    vec("final_ln.g", h, 1.0)
    vec("final_ln.b", h)
    if config.feature_dim:
        mat("feat_proj", config.feature_dim, h)
        vec("feat_proj_b", h)
    mat("trunk", 2 * h if config.feature_dim else h, h)
    vec("trunk_b", h)
    for name in ("head_y", "head_t", "head_y0", "head_y1"):
        mat(name, h, 1)
        vec(f"{name}_b", 1)
    return params


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def forward(batch: Batch, params: dict, config: ModelConfig, train_mode: bool = False, rng=None) -> HeadOutputs:
    """Run the encoder and heads; dropout only when train_mode with an rng."""
    b, t_len = batch.token_ids.shape
    if t_len != config.max_len:
        raise ShapeMismatch(f"batch max_len {t_len} != config max_len {config.max_len}")
    if batch.features.shape != (b, config.feature_dim):
        raise ShapeMismatch(f"features {batch.features.shape} != ({b}, {config.feature_dim})")
    if batch.token_ids.max(initial=0) >= config.vocab_size:
        raise ShapeMismatch("token id outside vocabulary")
    drop = config.dropout if (train_mode and rng is not None) else 0.0
    h = config.hidden_dim

    buckets = np.minimum(batch.day_offsets, config.obs_days - 1) // 7
    x = nm.embedding_gather(params["tok_emb"], batch.token_ids)
    x = nm.add(x, nm.embedding_gather(params["type_emb"], batch.type_ids))
    x = nm.add(x, nm.embedding_gather(params["pos_emb"], np.broadcast_to(np.arange(t_len), (b, t_len))))
    x = nm.add(x, nm.embedding_gather(params["time_emb"], buckets))

    mask3 = np.repeat(batch.mask[:, :, None], h, axis=2)
    if config.recency_tau is not None:
        decay = np.exp(-(config.obs_days - batch.day_offsets) / config.recency_tau)
        x = nm.multiply(x, nm.constant(np.repeat(decay[:, :, None], h, axis=2)))
    # Zero PAD rows so no signal leaks through residual paths.
    x = nm.multiply(x, nm.constant(mask3))
    if drop:
        x = nm.dropout_apply(x, _dropout_mask(rng, x.shape, drop) * mask3)

    key_pad = (batch.mask == 0.0)[:, None, :]  # [B, 1, T] broadcast over queries
    inv_sqrt = 1.0 / math.sqrt(config.head_dim)
    for l in range(config.n_layers):
        xn = nm.layer_norm(x, params[f"l{l}.ln1.g"], params[f"l{l}.ln1.b"])
        ctx = []
        for head in range(config.n_heads):
            q = nm.matmul(xn, params[f"l{l}.q{head}"])
            k = nm.matmul(xn, params[f"l{l}.k{head}"])
            v = nm.matmul(xn, params[f"l{l}.v{head}"])
            scores = nm.scale(nm.matmul(q, k, transpose_b=True), inv_sqrt)
            att = nm.softmax_rows(nm.masked_fill(scores, key_pad, -1e9))
            ctx.append(nm.matmul(att, v))
        attn = nm.add(nm.matmul(nm.concat(ctx, axis=-1), params[f"l{l}.attn_out"]), params[f"l{l}.attn_out_b"])
        if drop:
            attn = nm.dropout_apply(attn, _dropout_mask(rng, attn.shape, drop))
        x = nm.add(x, attn)
        xn2 = nm.layer_norm(x, params[f"l{l}.ln2.g"], params[f"l{l}.ln2.b"])
        ff = nm.gelu(nm.add(nm.matmul(xn2, params[f"l{l}.ff1"]), params[f"l{l}.ff1_b"]))
        ff = nm.add(nm.matmul(ff, params[f"l{l}.ff2"]), params[f"l{l}.ff2_b"])
        if drop:
            ff = nm.dropout_apply(ff, _dropout_mask(rng, ff.shape, drop))
        x = nm.add(x, ff)

    x = nm.layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    # Mean over non-PAD positions; empty sequences pool to the zero vector.
    x = nm.multiply(x, nm.constant(mask3))
    lengths = np.maximum(batch.mask.sum(axis=1), 1.0)
    pooled = nm.multiply(nm.reduce_sum(x, axis=1), nm.constant(np.repeat(1.0 / lengths[:, None], h, axis=1)))

    if config.feature_dim:
        feats = nm.add(nm.matmul(nm.constant(batch.features), params["feat_proj"]), params["feat_proj_b"])
        pooled = nm.concat([pooled, feats], axis=-1)
    z = nm.gelu(nm.add(nm.matmul(pooled, params["trunk"]), params["trunk_b"]))
    if drop:
        z = nm.dropout_apply(z, _dropout_mask(rng, z.shape, drop))

    def head(name):
        return nm.sigmoid(nm.add(nm.matmul(z, params[name]), params[f"{name}_b"]))

    return HeadOutputs(y_hat=head("head_y"), t_hat=head("head_t"), y0_hat=head("head_y0"), y1_hat=head("head_y1"))


def factual(t: np.ndarray, outs: HeadOutputs) -> nm.Tensor:
    """y_t = t*y1 + (1-t)*y0, exact at both binary endpoints."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if not np.isin(t, (0.0, 1.0)).all():
        raise InvalidHyper("treatment flags must be binary")
    return nm.add(
        nm.multiply(outs.y1_hat, nm.constant(t)),
        nm.multiply(outs.y0_hat, nm.constant(1.0 - t)),
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _bce_terms(p: nm.Tensor):
    """(log p, log(1-p)) with probabilities clipped away from {0,1}."""
    p = nm.clip01(p)
    log_p = nm.log(p)
    log_1p = nm.log(nm.add(nm.scale(p, -1.0), nm.constant(np.ones(p.shape))))
    return log_p, log_1p


def loss_fn(kind: str, p: nm.Tensor, y: np.ndarray, hyper: dict | None = None) -> nm.Tensor:
    """Per-example loss column [B, 1] for the configured loss family."""
    hyper = dict(hyper or {})
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if p.shape != y.shape:
        raise ShapeMismatch(f"probabilities {p.shape} vs labels {y.shape}")

    if kind == "weighted-bce":
        w_pos = float(hyper.pop("w_pos", 1.0))
        if w_pos <= 0:
            raise InvalidHyper("w_pos must be positive")
        log_p, log_1p = _bce_terms(p)
        pos = nm.multiply(log_p, nm.constant(y * w_pos))
        neg = nm.multiply(log_1p, nm.constant(1.0 - y))
        return nm.scale(nm.add(pos, neg), -1.0)

    if kind == "focal":
        gamma = float(hyper.pop("gamma", 2.0))
        alpha = float(hyper.pop("focal_alpha", 1.0))
        if gamma < 0 or alpha <= 0:
            raise InvalidHyper("focal gamma must be >= 0 and alpha positive")
        pc = nm.clip01(p)
        # p_t = p on positives, 1-p on negatives; loss = -alpha (1-p_t)^g log p_t
        p_t = nm.add(nm.multiply(pc, nm.constant(y)),
                     nm.multiply(nm.add(nm.scale(pc, -1.0), nm.constant(np.ones(y.shape))),
                                 nm.constant(1.0 - y)))
        one_minus = nm.add(nm.scale(p_t, -1.0), nm.constant(np.ones(y.shape)))
        focus = nm.power(one_minus, gamma) if gamma else nm.constant(np.ones(y.shape))
        return nm.scale(nm.multiply(focus, nm.log(p_t)), -alpha)

    if kind == "class-balanced":
        beta = float(hyper.pop("beta", 0.999))
        if not 0.0 <= beta < 1.0:
            raise InvalidHyper("class-balanced beta must lie in [0, 1)")
        counts = hyper.pop("class_counts", None)
        if counts is None:
            n1 = float(y.sum())
            counts = (y.size - n1, n1)
        n0, n1 = (max(float(c), 1.0) for c in counts)
        w0 = (1.0 - beta) / (1.0 - beta**n0) if beta else 1.0
        w1 = (1.0 - beta) / (1.0 - beta**n1) if beta else 1.0
        weights = np.where(y == 1.0, w1, w0)
        log_p, log_1p = _bce_terms(p)
        pos = nm.multiply(log_p, nm.constant(y * weights))
        neg = nm.multiply(log_1p, nm.constant((1.0 - y) * weights))
        return nm.scale(nm.add(pos, neg), -1.0)

    raise InvalidHyper(f"unknown loss kind {kind!r}")


def l2_penalty(params: dict) -> nm.Tensor:
    total = None
    for name in sorted(params):
        p = params[name]
        sq = nm.reduce_sum(nm.multiply(p, p))
        total = sq if total is None else nm.add(total, sq)
    return total


def combined_loss(outs: HeadOutputs, y, t, config: ModelConfig, weights: dict | None = None) -> nm.Tensor:
    """L = L_y + alpha * L_t + lambda * sum(theta^2).

    With alpha > 0 the outcome term scores the factual composition; with
    alpha = 0 (outcome-only mode) it scores y_hat and the auxiliary heads
    receive no gradient. ``weights`` carries loss hyperparameters and, when
    the L2 term is wanted, the parameter dict under key "params".
    """
    weights = dict(weights or {})
    params = weights.pop("params", None)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if config.alpha > 0:
        if t is None:
            raise InvalidHyper("treatment flags required when alpha > 0")
        p = factual(t, outs)
    else:
        p = outs.y_hat
    total = nm.reduce_mean(loss_fn(config.loss_kind, p, y, weights))
    if config.alpha > 0:
        t_col = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        l_t = nm.reduce_mean(loss_fn("weighted-bce", outs.t_hat, t_col))
        total = nm.add(total, nm.scale(l_t, config.alpha))
    if config.l2_lambda > 0:
        if params is None:
            raise InvalidHyper("params required in weights for the L2 term")
        total = nm.add(total, nm.scale(l2_penalty(params), config.l2_lambda))
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, config: ModelConfig, extra: dict | None = None) -> None:
    """Single-file container: config + named float64 tensors + extras."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_json_dict(),
        "extra": extra or {},
        "tensors": {
            name: {
                "shape": list(p.data.shape),
                "data": base64.b64encode(np.ascontiguousarray(p.data).tobytes()).decode("ascii"),
            }
            for name, p in params.items()
        },
    }
    from .util import atomic_write_text

    atomic_write_text(path, canonical_json(payload))


def load_checkpoint(path):
    """Returns (params, config, extra); shape or version mismatch is fatal."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {payload.get('version')!r}")
    config = ModelConfig(**payload["config"])
    want = {name: tuple(p.data.shape) for name, p in init_params(config, seed=0).items()}
    params = {}
    for name, spec in payload["tensors"].items():
        arr = np.frombuffer(base64.b64decode(spec["data"]), dtype=np.float64).reshape(spec["shape"]).copy()
        params[name] = nm.parameter(arr)
    got = {name: tuple(p.data.shape) for name, p in params.items()}
    if got != want:
        raise CheckpointMismatch("checkpoint tensors do not match the stored config")
    return params, config, payload.get("extra", {})
