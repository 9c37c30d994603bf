"""Retrieval and semantic-consistency objectives.

The full objective is ``L_ret + lam * L_sc`` where ``L_ret`` is a
bidirectional triplet loss over BatchHard-mined triplets and ``L_sc``
averages, over both modalities, the classification cross-entropy plus the KL
divergence from the other modality's class distribution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .dataset import Batch
from .encoders import ModelParams, embed_batch
from .numerics import DimensionError, Tensor

POSITIVE_MODES = ("paired", "same-class")
REDUCTIONS = ("mean", "sum")
RETRIEVAL_VARIANTS = ("triplet", "cosine")
SC_MODES = ("sc", "cls", "none")


class MiningError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class TripletMarginConfig:
    margin: float = 0.3
    positive_mode: str = "paired"
    reduction: str = "mean"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.positive_mode not in POSITIVE_MODES:
            raise ValueError(f"positive_mode must be one of {POSITIVE_MODES}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


@dataclass
class LossConfig:
    lam: float = 0.05
    triplet: TripletMarginConfig = None
    variant: str = "triplet"
    sc_mode: str = "sc"
    cosine_margin: float = 0.1

    def __post_init__(self):
        if self.triplet is None:
            self.triplet = TripletMarginConfig()
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.variant not in RETRIEVAL_VARIANTS:
            raise ValueError(f"variant must be one of {RETRIEVAL_VARIANTS}")
        if self.sc_mode not in SC_MODES:
            raise ValueError(f"sc_mode must be one of {SC_MODES}")


@dataclass
class LossBreakdown:
    retrieval: float
    cls_img: float
    cls_rec: float
    kl_rec_img: float   # KL(p_rec || p_img)
    kl_img_rec: float   # KL(p_img || p_rec)
    sc: float
    lam: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


# -- retrieval ------------------------------------------------------------------
def pairwise_distance_matrix(I_batch, R_batch) -> Tensor:
    """D[i, j] = ||I_i - R_j||_2."""
    I_batch, R_batch = nx.as_tensor(I_batch), nx.as_tensor(R_batch)
    if I_batch.shape[0] != R_batch.shape[0]:
        raise DimensionError(f"batch mismatch: {I_batch.shape} images vs {R_batch.shape} recipes")
    return nx.pairwise_l2(I_batch, R_batch)


@dataclass
class Mining:
    """Per-anchor hardest positive/negative indices.

    ``img_pos[i]``/``img_neg[i]`` index recipes for image anchor i;
    ``rec_pos[j]``/``rec_neg[j]`` index images for recipe anchor j.
    """
    img_pos: np.ndarray
    img_neg: np.ndarray
    rec_pos: np.ndarray
    rec_neg: np.ndarray


def positive_mask(pair_ids, labels, mode: str) -> np.ndarray:
    key = np.asarray(pair_ids if mode == "paired" else labels)
    return key[:, None] == key[None, :]


def batch_hard_mine(D, pair_ids=None, labels=None, cfg: TripletMarginConfig | None = None) -> Mining:
    """Farthest positive and closest negative per anchor, in both directions.

    Ties resolve to the lowest index.
    """
    cfg = cfg or TripletMarginConfig()
    D = np.asarray(D.data if isinstance(D, Tensor) else D, dtype=np.float64)
    B = D.shape[0]
    if D.shape != (B, B):
        raise DimensionError(f"distance matrix must be square, got {D.shape}")
    if B < 2:
        raise MiningError("BatchHard mining needs at least 2 samples")
    pair_ids = np.arange(B) if pair_ids is None else np.asarray(pair_ids)
    if cfg.positive_mode == "same-class" and labels is None:
        raise MiningError("same-class positives need class labels")
    pos = positive_mask(pair_ids, labels, cfg.positive_mode)
    empty_neg = np.flatnonzero(pos.all(axis=1))
    if empty_neg.size:
        raise MiningError(f"anchor {int(empty_neg[0])} has no negative in the batch")
    empty_pos = np.flatnonzero(~pos.any(axis=1))
    if empty_pos.size:
        raise MiningError(f"anchor {int(empty_pos[0])} has no positive in the batch")
    # pos is symmetric, so the same mask serves the recipe-anchor (column) view
    img_pos = np.argmax(np.where(pos, D, -np.inf), axis=1)
    img_neg = np.argmin(np.where(pos, np.inf, D), axis=1)
    Dt = D.T
    rec_pos = np.argmax(np.where(pos, Dt, -np.inf), axis=1)
    rec_neg = np.argmin(np.where(pos, np.inf, Dt), axis=1)
    return Mining(img_pos, img_neg, rec_pos, rec_neg)


def hinge_terms(D: Tensor, mining: Mining, margin: float) -> tuple[Tensor, Tensor]:
    """Pre-hinge values d(a,p) - d(a,n) + margin for image anchors and recipe anchors."""
    B = D.shape[0]
    rows = np.arange(B)
    img = D[rows, mining.img_pos] - D[rows, mining.img_neg] + margin
    rec = D[mining.rec_pos, rows] - D[mining.rec_neg, rows] + margin
    return img, rec


def triplet_loss(I_batch, R_batch, cfg: TripletMarginConfig | None = None,
                 pair_ids=None, labels=None, return_mining: bool = False):
    """Bidirectional BatchHard triplet loss; mean over the 2B anchors by default."""
    cfg = cfg or TripletMarginConfig()
    D = pairwise_distance_matrix(I_batch, R_batch)
    mining = batch_hard_mine(D, pair_ids, labels, cfg)
    img, rec = hinge_terms(D, mining, cfg.margin)
    total = nx.tsum(nx.hinge(img)) + nx.tsum(nx.hinge(rec))
    if cfg.reduction == "mean":
        total = total * (1.0 / (2 * D.shape[0]))
    if return_mining:
        return total, mining, (img.data, rec.data)
    return total


def _l2_normalize(x: Tensor) -> Tensor:
    return x / nx.sqrt(nx.tsum(x * x, axis=-1, keepdims=True) + 1e-12)


def cosine_embedding_loss(I_batch, R_batch, margin: float = 0.1, pair_ids=None) -> Tensor:
    """Pairwise cosine loss: mean(1 - cos) over pairs plus mean hinge(cos - margin) over non-pairs."""
    I_batch, R_batch = nx.as_tensor(I_batch), nx.as_tensor(R_batch)
    B = I_batch.shape[0]
    pair_ids = np.arange(B) if pair_ids is None else np.asarray(pair_ids)
    pos = (pair_ids[:, None] == pair_ids[None, :]).astype(np.float64)
    C = nx.matmul(_l2_normalize(I_batch), nx.transpose(_l2_normalize(R_batch)))
    pos_term = nx.tsum((1.0 - C) * pos) * (1.0 / pos.sum())
    neg = 1.0 - pos
    neg_term = nx.tsum(nx.hinge(C - margin) * neg) * (1.0 / max(neg.sum(), 1.0))
    return pos_term + neg_term


# -- semantic consistency ---------------------------------------------------------
@dataclass
class ClassProbabilities:
    probs: Tensor       # [..., N]
    log_probs: Tensor   # [..., N]

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.log_probs.data, axis=-1)


def class_probabilities(embedding, W: Tensor, b: Tensor) -> ClassProbabilities:
    """Softmax class distribution of one embedding [d_J] or a batch [B, d_J]."""
    E = nx.as_tensor(embedding)
    single = E.ndim == 1
    if single:
        E = nx.reshape(E, (1, -1))
    logits = nx.matmul(E, W) + b
    if single:
        logits = logits[0]
    logp = nx.log_softmax_rows(logits)
    return ClassProbabilities(nx.exp(logp), logp)


def classifier_head(params: ModelParams, modality: str) -> tuple[Tensor, Tensor]:
    if params.config.classifier_sharing == "shared":
        return params["cls_shared_W"], params["cls_shared_b"]
    tag = {"image": "img", "recipe": "rec"}[modality]
    return params[f"cls_{tag}_W"], params[f"cls_{tag}_b"]


def cross_entropy(p: ClassProbabilities, true_class) -> Tensor:
    """-log p[true_class], per sample."""
    logp = p.log_probs
    N = logp.shape[-1]
    y = np.asarray(true_class, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= N):
        raise LabelError(f"class label(s) outside [0, {N}): {np.unique(y[(y < 0) | (y >= N)]).tolist()}")
    if logp.ndim == 1:
        return -logp[int(y)]
    return -logp[np.arange(logp.shape[0]), y]


def kl_divergence(p: ClassProbabilities, q: ClassProbabilities) -> Tensor:
    """KL(p || q) = sum_i p_i (log p_i - log q_i) along the class axis."""
    return nx.tsum(p.probs * (p.log_probs - q.log_probs), axis=-1)


@dataclass
class SCTerms:
    sc: Tensor
    cls_img: Tensor
    cls_rec: Tensor
    kl_rec_img: Tensor
    kl_img_rec: Tensor


def semantic_consistency_loss(p_img: ClassProbabilities, p_rec: ClassProbabilities,
                              c_img, c_rec, mode: str = "sc") -> SCTerms:
    """Batch mean of {(CE_img + KL(p_rec||p_img)) + (CE_rec + KL(p_img||p_rec))} / 2.

    ``mode="cls"`` keeps only the two cross-entropies (independent classifiers).
    """
    ce_img = cross_entropy(p_img, c_img)
    ce_rec = cross_entropy(p_rec, c_rec)
    kl_ri = kl_divergence(p_rec, p_img)
    kl_ir = kl_divergence(p_img, p_rec)
    if mode == "cls":
        per = (ce_img + ce_rec) * 0.5
    else:
        per = ((ce_img + kl_ri) + (ce_rec + kl_ir)) * 0.5
    return SCTerms(nx.mean(per), nx.mean(ce_img), nx.mean(ce_rec), nx.mean(kl_ri), nx.mean(kl_ir))


# -- total ------------------------------------------------------------------------
def combine(retrieval: Tensor, sc: Tensor, lam: float) -> Tensor:
    return retrieval + sc * lam


def loss_from_embeddings(I: Tensor, R: Tensor, labels, params: ModelParams, cfg: LossConfig,
                         pair_ids=None) -> tuple[Tensor, LossBreakdown]:
    if cfg.variant == "cosine":
        l_ret = cosine_embedding_loss(I, R, cfg.cosine_margin, pair_ids)
    else:
        l_ret = triplet_loss(I, R, cfg.triplet, pair_ids, labels)
    p_img = class_probabilities(I, *classifier_head(params, "image"))
    p_rec = class_probabilities(R, *classifier_head(params, "recipe"))
    terms = semantic_consistency_loss(p_img, p_rec, labels, labels,
                                      mode="cls" if cfg.sc_mode == "cls" else "sc")
    lam = 0.0 if cfg.sc_mode == "none" else cfg.lam
    total = combine(l_ret, terms.sc, lam)
    bd = LossBreakdown(
        retrieval=l_ret.item(), cls_img=terms.cls_img.item(), cls_rec=terms.cls_rec.item(),
        kl_rec_img=terms.kl_rec_img.item(), kl_img_rec=terms.kl_img_rec.item(),
        sc=terms.sc.item(), lam=lam, total=total.item())
    return total, bd


def total_loss(batch: Batch, params: ModelParams, cfg: LossConfig | float = 0.05) -> tuple[Tensor, LossBreakdown]:
    """Full objective on one batch; returns the scalar graph node and its breakdown."""
    if not isinstance(cfg, LossConfig):
        cfg = LossConfig(lam=float(cfg))
    I, R = embed_batch(batch, params)
    return loss_from_embeddings(I, R, batch.labels, params, cfg, batch.pair_ids)
