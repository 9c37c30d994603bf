"""Training drivers shared by the CLI and the acceptance suite: single runs, ablations, lambda sweeps."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .dataset import Dataset, FoodPairRecord, collate, load_dataset, split_dataset, synthetic_generate
from .encoders import ModelConfig, ModelParams, embed_batch, embed_records, init_params
from .evaluation import EvalReport, format_table, intra_class_distance_report, sampled_eval
from .gradcheck import GradCheckReport, finite_difference_check
from .losses import LossConfig, batch_hard_mine, hinge_terms, pairwise_distance_matrix, total_loss
from .numerics import no_grad
from .trainer import FitResult, fit

# ablation rows: name -> (attention, consistency mode, retrieval loss)
ABLATION_VARIANTS: dict[str, dict] = {
    "TL": {"attention": False, "sc_mode": "none", "loss_variant": "triplet"},
    "TL+SA": {"attention": True, "sc_mode": "none", "loss_variant": "triplet"},
    "TL+cls": {"attention": False, "sc_mode": "cls", "loss_variant": "triplet"},
    "TL+SC": {"attention": False, "sc_mode": "sc", "loss_variant": "triplet"},
    "SCAN": {"attention": True, "sc_mode": "sc", "loss_variant": "triplet"},
    "CL": {"attention": False, "sc_mode": "none", "loss_variant": "cosine"},
    "CL+SA": {"attention": True, "sc_mode": "none", "loss_variant": "cosine"},
    "CL+cls": {"attention": False, "sc_mode": "cls", "loss_variant": "cosine"},
    "CL+SC": {"attention": False, "sc_mode": "sc", "loss_variant": "cosine"},
    "CL+SC+SA": {"attention": True, "sc_mode": "sc", "loss_variant": "cosine"},
}
TRIPLET_ROWS = ("TL", "TL+SA", "TL+cls", "TL+SC", "SCAN")
LAMBDA_GRID = (0.01, 0.05, 0.1, 0.5)


def prepare_splits(cfg: RunConfig) -> dict[str, Dataset]:
    d = cfg.data
    ds = load_dataset(d.path) if d.path else synthetic_generate(d.synthetic)
    return split_dataset(ds, d.split_fractions, d.split_seed)


def model_config_for(cfg: RunConfig, ds: Dataset) -> ModelConfig:
    m = ds.manifest
    return cfg.model.build(m.vocab_size, m.num_classes, m.sentence_dim, m.image_dim)


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    try:
        v = ABLATION_VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {list(ABLATION_VARIANTS)}") from None
    return dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, attention=v["attention"]),
        train=dataclasses.replace(cfg.train, sc_mode=v["sc_mode"], loss_variant=v["loss_variant"],
                                  lam=0.0 if v["sc_mode"] == "none" else cfg.train.lam),
    )


@dataclass
class RunResult:
    config: RunConfig
    fit: FitResult
    test: EvalReport
    intra_class: dict
    loss_trace: list[float] = field(default_factory=list)

    @property
    def i2r(self) -> dict[str, float]:
        return self.test.mean["image_to_recipe"]


def params_from(ckpt, model_config: ModelConfig) -> ModelParams:
    p = init_params(model_config)
    p.load_arrays(ckpt.params)
    return p


def evaluate_checkpoint(params: ModelParams, ds: Dataset, cfg: RunConfig) -> tuple[EvalReport, dict]:
    img, rec = embed_records(ds.records, params)
    size = min(cfg.eval.subset_size, len(ds))
    report = sampled_eval(img, rec, size, cfg.eval.n_subsets if size < len(ds) else 1, cfg.eval.seed)
    icd = intra_class_distance_report([r.label for r in ds.records], img, rec)
    report.intra_class = icd
    return report, icd


def run_training(cfg: RunConfig, splits: dict[str, Dataset] | None = None, report_path=None) -> RunResult:
    """Train on the train split, select on val, evaluate the selected checkpoint on test."""
    splits = splits or prepare_splits(cfg)
    mc = model_config_for(cfg, splits["train"])
    res = fit(splits["train"], cfg.train, mc, splits.get("val"), report_path=report_path)
    params = params_from(res.best, mc)
    test, icd = evaluate_checkpoint(params, splits["test"], cfg)
    trace = [h["total"] for h in res.final.history]
    return RunResult(cfg, res, test, icd, trace)


def untrained_baseline(cfg: RunConfig, splits: dict[str, Dataset] | None = None) -> EvalReport:
    """Test metrics of the seeded initialisation, before any update."""
    splits = splits or prepare_splits(cfg)
    params = init_params(model_config_for(cfg, splits["train"]))
    return evaluate_checkpoint(params, splits["test"], cfg)[0]


def ablate(cfg: RunConfig, variants=TRIPLET_ROWS) -> dict[str, RunResult]:
    splits = prepare_splits(cfg)
    return {v: run_training(apply_variant(cfg, v), splits) for v in variants}


def lambda_sweep(cfg: RunConfig, lambdas=LAMBDA_GRID) -> dict[float, RunResult]:
    splits = prepare_splits(cfg)
    return {lam: run_training(dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, lam=lam)), splits)
            for lam in lambdas}


def ablation_table(results: dict[str, RunResult]) -> str:
    return format_table([(name, r.test.mean) for name, r in results.items()], label="variant")


def sweep_table(results: dict[float, RunResult]) -> str:
    return format_table([(f"{lam:g}", r.test.mean) for lam, r in results.items()], label="lambda")


# -- gradient check of the full objective ------------------------------------------
def _toy_batch(rng, B, N, vocab, d_s, d_img, max_tokens=5, max_sents=3):
    recs = []
    for i in range(B):
        nt = int(rng.integers(1, max_tokens + 1))
        m = int(rng.integers(1, max_sents + 1))
        recs.append(FoodPairRecord(i, int(rng.integers(0, N)), rng.integers(1, vocab, nt),
                                   rng.standard_normal((m, d_s)), rng.standard_normal(d_img)))
    return collate(recs)


def _near_kink(batch, params, cfg: LossConfig, tol: float) -> bool:
    with no_grad():
        I, R = embed_batch(batch, params)
        D = pairwise_distance_matrix(I, R)
        mining = batch_hard_mine(D, batch.pair_ids, batch.labels, cfg.triplet)
        img, rec = hinge_terms(D, mining, cfg.triplet.margin)
    if np.min(np.abs(np.concatenate([img.data, rec.data]))) < tol:
        return True
    # a near-tie in negative selection would flip under perturbation
    d = D.data
    for mat in (d, d.T):
        masked = mat + np.diag(np.full(len(mat), np.inf))
        two = np.sort(masked, axis=1)[:, :2]
        if np.min(two[:, 1] - two[:, 0]) < tol:
            return True
    return False


def full_loss_gradcheck(batch_size: int = 8, joint_dim: int = 16, num_classes: int = 5, lam: float = 0.05,
                        h: float = 1e-5, seed: int = 0, cell: str = "lstm", attention: bool = True,
                        max_coords: int | None = None, kink_tol: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of every parameter of the full objective on a random toy batch.

    Seeds whose hinges or BatchHard selections sit within ``kink_tol`` of a
    switch point are skipped; the seed actually used is recorded in the report.
    """
    vocab, d_s, d_img = 12, 5, 6
    cfg = LossConfig(lam=lam)
    for attempt in range(100):
        s = seed + attempt
        rng = np.random.default_rng(s)
        mc = ModelConfig(vocab_size=vocab, num_classes=num_classes, word_dim=4, hidden_dim=3,
                         sentence_dim=d_s, image_dim=d_img, joint_dim=joint_dim, cell=cell,
                         attention=attention, init_seed=s)
        params = init_params(mc)
        batch = _toy_batch(rng, batch_size, num_classes, vocab, d_s, d_img)
        if not _near_kink(batch, params, cfg, kink_tol):
            break
    else:
        raise RuntimeError("could not find a kink-free gradient-check point")
    rep = finite_difference_check(lambda: total_loss(batch, params, cfg)[0],
                                  dict(params.items()), h=h, max_coords=max_coords, seed=s)
    rep.seed = s
    return rep
