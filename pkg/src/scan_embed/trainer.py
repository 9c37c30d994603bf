"""Mini-batch training with Adam, step learning-rate decay and alternating encoder updates."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .dataset import Dataset, DatasetError, collate
from .encoders import IMAGE_SIDE, RECIPE_SIDE, ModelConfig, ModelParams, embed_records, init_params
from .evaluation import sampled_eval
from .losses import LossBreakdown, LossConfig, TripletMarginConfig, total_loss
from .numerics import DimensionError

log = logging.getLogger(__name__)

SIDES = (IMAGE_SIDE, RECIPE_SIDE)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_epoch: int = 30
    lam: float = 0.05
    margin: float = 0.3
    max_epochs: int = 40
    seed: int = 0
    alternation_period: int = 1
    loss_variant: str = "triplet"
    sc_mode: str = "sc"
    positive_mode: str = "paired"
    reduction: str = "mean"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_subset_size: int = 0      # 0 = whole validation split
    val_subsets: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 so every anchor has a negative")
        if self.alternation_period < 1:
            raise ValueError("alternation period must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        self.loss_config()  # validates loss fields

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lam=self.lam, variant=self.loss_variant, sc_mode=self.sc_mode,
            triplet=TripletMarginConfig(self.margin, self.positive_mode, self.reduction))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, nx.Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()}, 0, beta1, beta2, eps)


def adam_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """One bias-corrected Adam update. Parameter arrays are replaced, never mutated."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"adam_step: {name} has shape {p.shape}, gradient {g.shape}, "
                                 f"moment {state.m[name].shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new.flags.writeable = False
        p.data = new
    return params, state


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Single-step schedule; ``epoch`` is 1-based."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return config.lr if epoch < config.decay_epoch else config.lr * config.lr_decay


def active_side(batch_counter: int, period: int) -> str:
    return SIDES[(batch_counter // period) % 2]


class Trainer:
    """Owns parameters, per-side Adam state, the shuffling RNG and the loss history."""

    def __init__(self, params: ModelParams, config: TrainConfig, train: Dataset,
                 rng: np.random.Generator | None = None):
        if len(train) < 2:
            raise DatasetError("training split needs at least 2 records")
        self.params = params
        self.config = config
        self.train = train
        self.loss_cfg = config.loss_config()
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.opt = {side: OptimizerState.zeros_like(self._side_params(side), config.beta1,
                                                    config.beta2, config.adam_eps)
                    for side in SIDES}
        self.epoch = 0
        self.batch_counter = 0
        self.history: list[dict] = []       # one dict per batch
        self.updates: list[str] = []        # side updated at each batch

    def _side_params(self, side: str) -> dict[str, nx.Tensor]:
        return {n: self.params[n] for n in self.params.names_for(side)}

    def epoch_batches(self) -> list[np.ndarray]:
        n = len(self.train)
        bs = min(self.config.batch_size, n)
        perm = self.rng.permutation(n)
        # trailing short batch dropped
        return [perm[s:s + bs] for s in range(0, n - bs + 1, bs)]

    def step(self, indices, lr: float) -> LossBreakdown:
        if len(indices) == 0:
            raise DatasetError("empty batch")
        batch = collate([self.train[int(i)] for i in indices])
        nx.zero_grad(self.params.values())
        loss, bd = total_loss(batch, self.params, self.loss_cfg)
        loss.backward()
        side = active_side(self.batch_counter, self.config.alternation_period)
        active = self._side_params(side)
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in active.items()}
        if "word_embedding" in grads:
            grads["word_embedding"] = grads["word_embedding"].copy()
            grads["word_embedding"][0] = 0.0
        adam_step(active, grads, self.opt[side], lr)
        nx.zero_grad(self.params.values())
        self.batch_counter += 1
        self.updates.append(side)
        return bd

    def train_epoch(self, max_batches: int | None = None) -> list[LossBreakdown]:
        self.epoch += 1
        lr = lr_at_epoch(self.config, self.epoch)
        trace = []
        for b, idx in enumerate(self.epoch_batches()):
            if max_batches is not None and b >= max_batches:
                break
            bd = self.step(idx, lr)
            trace.append(bd)
            self.history.append({"epoch": self.epoch, "batch": b, **bd.to_dict()})
        return trace

    # -- persistence ----------------------------------------------------------
    def checkpoint(self):
        from .checkpoint import Checkpoint
        return Checkpoint(
            model_config=self.params.config, train_config=self.config,
            params=self.params.arrays(),
            optimizer={s: OptimizerState({k: v.copy() for k, v in self.opt[s].m.items()},
                                         {k: v.copy() for k, v in self.opt[s].v.items()},
                                         self.opt[s].t, self.opt[s].beta1, self.opt[s].beta2, self.opt[s].eps)
                       for s in SIDES},
            epoch=self.epoch, batch_counter=self.batch_counter,
            rng_state=self.rng.bit_generator.state, history=list(self.history))

    @classmethod
    def from_checkpoint(cls, ckpt, train: Dataset) -> Trainer:
        params = init_params(ckpt.model_config)
        params.load_arrays(ckpt.params)
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        tr = cls(params, ckpt.train_config, train, rng)
        for s in SIDES:
            st = ckpt.optimizer[s]
            tr.opt[s] = OptimizerState({k: v.copy() for k, v in st.m.items()},
                                       {k: v.copy() for k, v in st.v.items()},
                                       st.t, st.beta1, st.beta2, st.eps)
        tr.epoch = ckpt.epoch
        tr.batch_counter = ckpt.batch_counter
        tr.history = list(ckpt.history)
        return tr


def train_epoch(dataset: Dataset, params: ModelParams, optimizer: dict[str, OptimizerState] | None,
                config: TrainConfig, epoch: int = 1, rng: np.random.Generator | None = None,
                batch_counter: int = 0) -> list[LossBreakdown]:
    """Functional wrapper around :class:`Trainer` for a single epoch."""
    tr = Trainer(params, config, dataset, rng)
    if optimizer is not None:
        tr.opt = optimizer
    tr.epoch = epoch - 1
    tr.batch_counter = batch_counter
    return tr.train_epoch()


def mean_breakdown(trace: list[LossBreakdown]) -> dict[str, float]:
    if not trace:
        return {}
    keys = trace[0].to_dict().keys()
    return {k: float(np.mean([getattr(b, k) for b in trace])) for k in keys}


@dataclass
class FitResult:
    best: object                     # Checkpoint with the best validation MedR
    final: object                    # Checkpoint after the last epoch
    epochs: list[dict] = field(default_factory=list)  # run-report records
    best_epoch: int = 0


def _selection_key(metrics: dict) -> tuple[float, float]:
    m = metrics["image_to_recipe"]
    return (m["medR"], -m["R@1"])


def evaluate_split(params: ModelParams, ds: Dataset, subset_size: int = 0, n_subsets: int = 1, seed: int = 0):
    img, rec = embed_records(ds.records, params)
    size = subset_size if 0 < subset_size <= len(ds) else len(ds)
    return sampled_eval(img, rec, size, n_subsets if size < len(ds) else 1, seed)


def fit(train: Dataset, config: TrainConfig, model_config: ModelConfig, val: Dataset | None = None,
        report_path: str | Path | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train for ``max_epochs``; keep the checkpoint with the best validation image-to-recipe MedR.

    Ties on MedR go to higher R@1, then to the earlier epoch. Without a
    validation split the final epoch is kept.
    """
    params = init_params(model_config)
    trainer = Trainer(params, config, train)
    best = trainer.checkpoint()
    best_key = None
    best_epoch = 0
    records = []
    fh = None
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(report_path, "w")
    try:
        for _ in range(config.max_epochs):
            lr = lr_at_epoch(config, trainer.epoch + 1)
            trace = trainer.train_epoch()
            rec = {"epoch": trainer.epoch, "lr": lr, "losses": mean_breakdown(trace),
                   "updates": trainer.updates[-len(trace):] if trace else []}
            if val is not None and len(val) > 0:
                rep = evaluate_split(trainer.params, val, config.val_subset_size, config.val_subsets, config.seed)
                rec["val"] = rep.mean
                key = _selection_key(rep.mean)
                if best_key is None or key < best_key:
                    best_key, best, best_epoch = key, trainer.checkpoint(), trainer.epoch
            else:
                best, best_epoch = trainer.checkpoint(), trainer.epoch
            records.append(rec)
            log.info("epoch %d lr %.2e loss %.4f", trainer.epoch, lr, rec["losses"].get("total", float("nan")))
            if fh is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if fh is not None:
            fh.close()
    return FitResult(best=best, final=trainer.checkpoint(), epochs=records, best_epoch=best_epoch)
