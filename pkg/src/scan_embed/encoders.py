"""Recipe and image encoders mapping a record into the joint embedding space.

Recipe side: ingredient tokens -> embedding table -> bidirectional recurrent
encoder -> parameter-free self-attention with residual + layer norm -> masked
mean pool, and the same pipeline (own recurrent cell) over pre-computed
instruction sentence vectors. The two pooled features are concatenated and
projected with a tanh fully-connected layer. Image side: tanh projection of
pre-extracted backbone features.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .dataset import Batch, FoodPairRecord, collate
from .numerics import DimensionError, Tensor


class VocabularyError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


CELL_KINDS = ("lstm", "tanh")
POOLINGS = ("mean", "last")
CLASSIFIER_SHARING = ("per-modality", "shared")


@dataclass
class ModelConfig:
    vocab_size: int
    num_classes: int
    word_dim: int = 300
    hidden_dim: int = 300          # per direction; attention width is 2x this
    sentence_dim: int = 1024
    image_dim: int = 2048
    joint_dim: int = 1024
    cell: str = "lstm"
    attention: bool = True
    pooling: str = "mean"
    layer_norm_eps: float = nx.LAYER_NORM_EPS
    layer_norm_affine: bool = False
    classifier_sharing: str = "per-modality"
    init_seed: int = 0

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ValueError(f"cell must be one of {CELL_KINDS}, got {self.cell!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.classifier_sharing not in CLASSIFIER_SHARING:
            raise ValueError(f"classifier_sharing must be one of {CLASSIFIER_SHARING}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs the padding id plus at least one token")

    @property
    def attn_dim(self) -> int:
        return 2 * self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)


IMAGE_SIDE = "image"
RECIPE_SIDE = "recipe"
SHARED = "shared"


class ModelParams:
    """Named trainable tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    @staticmethod
    def side_of(name: str) -> str:
        if name.startswith("image_") or name.startswith("cls_img_"):
            return IMAGE_SIDE
        if name.startswith("cls_shared_"):
            return SHARED
        return RECIPE_SIDE

    def names_for(self, side: str) -> list[str]:
        """Parameters updated in ``side``'s phase; a shared classifier joins both."""
        return [n for n in self.tensors if self.side_of(n) in (side, SHARED)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            a = np.array(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise DimensionError(f"parameter {k}: expected {t.shape}, got {a.shape}")
            a.flags.writeable = False
            t.data = a

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(t.data, requires_grad=True, name=k)
                                         for k, t in self.tensors.items()})


def _uniform(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


def _cell_params(rng, prefix: str, d_in: int, d_r: int, cell: str) -> dict[str, np.ndarray]:
    width = 4 * d_r if cell == "lstm" else d_r
    out = {}
    for direction in ("fwd", "bwd"):
        out[f"{prefix}_{direction}_W"] = _uniform(rng, (d_in, width), d_r)
        out[f"{prefix}_{direction}_U"] = _uniform(rng, (d_r, width), d_r)
        out[f"{prefix}_{direction}_b"] = _uniform(rng, (width,), d_r)
    return out


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded initialisation: N(0,1) word table with a zero padding row, U(+-1/sqrt(fan)) elsewhere."""
    rng = np.random.default_rng(config.init_seed)
    c = config
    arrays: dict[str, np.ndarray] = {}
    table = rng.standard_normal((c.vocab_size, c.word_dim))
    table[0] = 0.0
    arrays["word_embedding"] = table
    arrays.update(_cell_params(rng, "ingr", c.word_dim, c.hidden_dim, c.cell))
    arrays.update(_cell_params(rng, "instr", c.sentence_dim, c.hidden_dim, c.cell))
    if c.layer_norm_affine:
        for branch in ("ingr", "instr"):
            arrays[f"{branch}_ln_gain"] = np.ones(c.attn_dim)
            arrays[f"{branch}_ln_bias"] = np.zeros(c.attn_dim)
    fused = 2 * c.attn_dim
    arrays["fusion_W"] = _uniform(rng, (fused, c.joint_dim), fused)
    arrays["fusion_b"] = _uniform(rng, (c.joint_dim,), fused)
    arrays["image_W"] = _uniform(rng, (c.image_dim, c.joint_dim), c.image_dim)
    arrays["image_b"] = _uniform(rng, (c.joint_dim,), c.image_dim)
    heads = ("shared",) if c.classifier_sharing == "shared" else ("img", "rec")
    for h in heads:
        arrays[f"cls_{h}_W"] = _uniform(rng, (c.joint_dim, c.num_classes), c.joint_dim)
        arrays[f"cls_{h}_b"] = _uniform(rng, (c.num_classes,), c.joint_dim)
    return ModelParams(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})


# -- building blocks ----------------------------------------------------------
def embed_ingredients(tokens, table: Tensor) -> Tensor:
    """Look up embedding rows; id 0 is the padding row (held at zero)."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise EmptySequenceError("ingredient sequence is empty")
    V = table.shape[0]
    if ids.min() < 0 or ids.max() >= V:
        bad = ids[(ids < 0) | (ids >= V)]
        raise VocabularyError(f"token id(s) {sorted(set(bad.tolist()))} outside vocabulary of size {V}")
    return nx.embedding_lookup(table, ids)


def _batched(x: Tensor, mask):
    """Promote a single sequence [n, d] to a batch of one."""
    if x.ndim == 2:
        x = nx.reshape(x, (1,) + x.shape)
        mask = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(1, -1)
        return x, mask, True
    return x, mask, False


def _cell_step(xw_t: Tensor, h: Tensor, c: Tensor | None, U: Tensor, b: Tensor, kind: str, d_r: int):
    pre = xw_t + nx.matmul(h, U) + b
    if kind == "tanh":
        return nx.tanh(pre), None
    i = nx.sigmoid(pre[:, 0:d_r])
    f = nx.sigmoid(pre[:, d_r:2 * d_r])
    g = nx.tanh(pre[:, 2 * d_r:3 * d_r])
    o = nx.sigmoid(pre[:, 3 * d_r:4 * d_r])
    c_new = f * c + i * g
    return o * nx.tanh(c_new), c_new


def _run_direction(Z: Tensor, mask: np.ndarray, W: Tensor, U: Tensor, b: Tensor,
                   kind: str, reverse: bool) -> list[Tensor]:
    B, n, _ = Z.shape
    d_r = U.shape[0]
    xw = nx.matmul(Z, W)  # all time steps at once
    h = Tensor(np.zeros((B, d_r)))
    c = Tensor(np.zeros((B, d_r))) if kind == "lstm" else None
    outs: list[Tensor | None] = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        h_new, c_new = _cell_step(xw[:, t, :], h, c, U, b, kind, d_r)
        m = mask[:, t:t + 1]
        if m.all():
            h, c = h_new, c_new
        else:
            # padded steps carry the previous state through unchanged
            keep = 1.0 - m
            h = h_new * m + h * keep
            if c is not None:
                c = c_new * m + c * keep
        outs[t] = h
    return outs


def run_birnn(Z: Tensor, params: ModelParams, prefix: str, mask=None, kind: str | None = None) -> Tensor:
    """Bidirectional recurrence; row t is [forward state at t ; backward state at t].

    ``Z`` is [n, d] or [B, n, d]; ``mask`` marks valid (1) and right-padded (0) steps.
    Initial states are zero in both directions.
    """
    kind = kind or params.config.cell
    Zb, maskb, squeeze = _batched(Z, mask)
    B, n, _ = Zb.shape
    if n < 1:
        raise EmptySequenceError("run_birnn needs at least one step")
    if maskb is None:
        maskb = np.ones((B, n))
    fwd = _run_direction(Zb, maskb, params[f"{prefix}_fwd_W"], params[f"{prefix}_fwd_U"],
                         params[f"{prefix}_fwd_b"], kind, reverse=False)
    bwd = _run_direction(Zb, maskb, params[f"{prefix}_bwd_W"], params[f"{prefix}_bwd_U"],
                         params[f"{prefix}_bwd_b"], kind, reverse=True)
    H = nx.stack([nx.concat([f, r], axis=-1) for f, r in zip(fwd, bwd)], axis=1)
    return H[0] if squeeze else H


def attention_weights(H: Tensor, mask=None) -> Tensor:
    """Row-stochastic softmax(H H^T / sqrt(d_h)); padded keys get zero weight."""
    d_h = H.shape[-1]
    scores = nx.matmul(H, nx.transpose(H)) * (1.0 / np.sqrt(d_h))
    if mask is not None:
        key_pad = (1.0 - np.asarray(mask, dtype=np.float64)) * nx.MASK_FILL
        key_pad = key_pad.reshape(key_pad.shape[:-1] + (1,) + key_pad.shape[-1:])
        scores = scores + key_pad
    return nx.softmax_rows(scores)


def self_attention(H: Tensor, mask=None, capture: dict | None = None) -> Tensor:
    A = attention_weights(H, mask)
    if capture is not None:
        capture["weights"] = A.data
    return nx.matmul(A, H)


def attend_and_normalize(H: Tensor, mask=None, eps: float = nx.LAYER_NORM_EPS,
                         gain: Tensor | None = None, bias: Tensor | None = None,
                         capture: dict | None = None) -> Tensor:
    return nx.layer_normalize(self_attention(H, mask, capture) + H, eps, gain, bias)


def pool_sequence(F: Tensor, mask=None) -> Tensor:
    """Mean over valid time steps: [n, d] -> [d] or [B, n, d] -> [B, d]."""
    if mask is None:
        if F.shape[-2] < 1:
            raise EmptySequenceError("cannot pool an empty sequence")
        return nx.mean(F, axis=-2)
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise EmptySequenceError("sequence consists only of padding")
    return nx.tsum(F * m[..., None], axis=-2) * (1.0 / counts)


def _pool_last(F: Tensor, mask) -> Tensor:
    # forward half at the last valid step, backward half at step 0
    m = np.asarray(mask, dtype=np.float64)
    last = m.sum(axis=-1).astype(int) - 1
    if np.any(last < 0):
        raise EmptySequenceError("sequence consists only of padding")
    B = F.shape[0]
    d_r = F.shape[-1] // 2
    fwd = F[np.arange(B), last][:, :d_r]
    bwd = F[:, 0, d_r:]
    return nx.concat([fwd, bwd], axis=-1)


def _encode_sequence(X: Tensor, mask: np.ndarray, params: ModelParams, prefix: str,
                     capture: dict | None = None) -> Tensor:
    cfg = params.config
    H = run_birnn(X, params, prefix, mask)
    if cfg.attention:
        gain = params.tensors.get(f"{prefix}_ln_gain")
        bias = params.tensors.get(f"{prefix}_ln_bias")
        F = attend_and_normalize(H, mask, cfg.layer_norm_eps, gain, bias, capture)
    else:
        F = H
    if cfg.pooling == "last":
        return _pool_last(F, mask)
    return pool_sequence(F, mask)


def encode_ingredients(tokens: np.ndarray, params: ModelParams, capture: dict | None = None) -> Tensor:
    """[B, n] padded token ids -> [B, d_h] ingredient features."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    mask = (tokens != 0).astype(np.float64)
    if np.any(mask.sum(axis=-1) == 0):
        raise EmptySequenceError("ingredient sequence consists only of padding")
    Z = embed_ingredients(tokens, params["word_embedding"])
    return _encode_sequence(Z, mask, params, "ingr", capture)


def encode_instructions(S, params: ModelParams, mask=None, capture: dict | None = None) -> Tensor:
    """Pre-computed sentence vectors [m, d_s] or [B, m, d_s] -> [d_h] or [B, d_h]."""
    S = nx.as_tensor(S)
    d_s = params.config.sentence_dim
    if S.shape[-1] != d_s:
        raise DimensionError(f"instruction sentence dim {S.shape[-1]} != configured {d_s}")
    single = S.ndim == 2
    if single:
        S = nx.reshape(S, (1,) + S.shape)
        mask = None if mask is None else np.asarray(mask, dtype=np.float64)[None, :]
    if S.shape[1] < 1:
        raise EmptySequenceError("need at least one instruction sentence")
    if mask is None:
        mask = np.ones(S.shape[:2])
    out = _encode_sequence(S, mask, params, "instr", capture)
    return out[0] if single else out


def fuse_recipe(f_ingr: Tensor, f_instr: Tensor, params: ModelParams) -> Tensor:
    x = nx.concat([f_ingr, f_instr], axis=-1)
    return nx.tanh(nx.matmul(x, params["fusion_W"]) + params["fusion_b"])


def encode_recipe_batch(batch: Batch, params: ModelParams, capture: dict | None = None) -> Tensor:
    ingr_cap = {} if capture is not None else None
    instr_cap = {} if capture is not None else None
    f_ingr = encode_ingredients(batch.tokens, params, ingr_cap)
    f_instr = encode_instructions(Tensor(batch.sentences), params, batch.sentence_mask, instr_cap)
    if capture is not None:
        capture["ingredients"] = ingr_cap.get("weights")
        capture["instructions"] = instr_cap.get("weights")
    return fuse_recipe(f_ingr, f_instr, params)


def encode_image_batch(images, params: ModelParams) -> Tensor:
    X = nx.as_tensor(images)
    d = params.config.image_dim
    if X.shape[-1] != d:
        raise DimensionError(f"image feature dim {X.shape[-1]} != configured {d}")
    return nx.tanh(nx.matmul(X, params["image_W"]) + params["image_b"])


def encode_recipe(record: FoodPairRecord, params: ModelParams) -> Tensor:
    """Joint-space recipe embedding R of one record, shape [d_J]."""
    return encode_recipe_batch(collate([record]), params)[0]


def encode_image(features, params: ModelParams) -> Tensor:
    """Joint-space image embedding I of one feature vector, shape [d_J]."""
    x = nx.as_tensor(features)
    if x.ndim != 1:
        raise DimensionError(f"encode_image expects a vector, got shape {x.shape}")
    return encode_image_batch(nx.reshape(x, (1, x.shape[0])), params)[0]


def embed_batch(batch: Batch, params: ModelParams) -> tuple[Tensor, Tensor]:
    """(image embeddings, recipe embeddings), each [B, d_J]."""
    return encode_image_batch(batch.images, params), encode_recipe_batch(batch, params)


def embed_records(records, params: ModelParams, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Graph-free embedding of many records; returns numpy arrays."""
    imgs, recs = [], []
    with nx.no_grad():
        for s in range(0, len(records), chunk):
            b = collate(records[s:s + chunk])
            I, R = embed_batch(b, params)
            imgs.append(I.data)
            recs.append(R.data)
    return np.concatenate(imgs), np.concatenate(recs)
