"""Cross-modal retrieval metrics: L2 ranking, MedR, Recall@K, subset sampling."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import DimensionError

KS = (1, 5, 10)
DIRECTIONS = ("image_to_recipe", "recipe_to_image")


class EvaluationError(ValueError):
    pass


def distance_rows(queries: np.ndarray, gallery: np.ndarray, chunk: int = 256):
    """Yield (start, block) with block[i, j] = ||queries[start+i] - gallery[j]||."""
    for s in range(0, len(queries), chunk):
        diff = queries[s:s + chunk, None, :] - gallery[None, :, :]
        yield s, np.sqrt((diff * diff).sum(axis=-1))


def rank_queries(queries, gallery) -> np.ndarray:
    """1-based rank of gallery[i] for query i under ascending L2 distance.

    Ties are broken by gallery index (a tied item with a lower index ranks first).
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or q.shape != g.shape:
        raise DimensionError(f"queries {q.shape} and gallery {g.shape} must both be [M, d]")
    M = len(q)
    if M < 1:
        raise EvaluationError("need at least one query")
    ranks = np.empty(M, dtype=np.int64)
    cols = np.arange(M)
    for s, block in distance_rows(q, g):
        rows = np.arange(s, s + len(block))
        true = block[np.arange(len(block)), rows][:, None]
        closer = (block < true).sum(axis=1)
        tied_before = ((block == true) & (cols[None, :] < rows[:, None])).sum(axis=1)
        ranks[rows] = 1 + closer + tied_before
    return ranks


def median_rank(ranks) -> float:
    """Median; the mean of the two middle values for an even count."""
    r = np.sort(np.asarray(ranks, dtype=np.float64))
    n = len(r)
    if n == 0:
        raise EvaluationError("median of an empty rank list")
    mid = n // 2
    return float(r[mid]) if n % 2 else float((r[mid - 1] + r[mid]) / 2)


def recall_at_k(ranks, k: int) -> float:
    """Percentage of queries whose counterpart ranks within the top k."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    r = np.asarray(ranks)
    if r.size == 0:
        raise EvaluationError("recall of an empty rank list")
    return 100.0 * float(np.count_nonzero(r <= k)) / r.size


def direction_metrics(ranks) -> dict[str, float]:
    out = {"medR": median_rank(ranks)}
    for k in KS:
        out[f"R@{k}"] = recall_at_k(ranks, k)
    return out


@dataclass
class EvalReport:
    subset_size: int
    seeds: list[int]
    subsets: list[dict[str, dict[str, float]]]
    mean: dict[str, dict[str, float]]
    intra_class: dict | None = field(default=None)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        return format_table([(f"subset {i}", s) for i, s in enumerate(self.subsets)] + [("mean", self.mean)])


def format_table(rows: list[tuple[str, dict[str, dict[str, float]]]], label: str = "") -> str:
    """Aligned text table: medR, R@1, R@5, R@10 for image->recipe then recipe->image."""
    metric_cols = ["medR"] + [f"R@{k}" for k in KS]
    width = max([len(label)] + [len(str(n)) for n, _ in rows]) + 2
    head1 = " " * width + f"{'image-to-recipe':^32}  {'recipe-to-image':^32}"
    head2 = f"{label:<{width}}" + "".join(f"{c:>8}" for c in metric_cols) + "  " + "".join(f"{c:>8}" for c in metric_cols)
    lines = [head1, head2]
    for name, m in rows:
        a = "".join(f"{m[DIRECTIONS[0]][c]:>8.1f}" for c in metric_cols)
        b = "".join(f"{m[DIRECTIONS[1]][c]:>8.1f}" for c in metric_cols)
        lines.append(f"{str(name):<{width}}{a}  {b}")
    return "\n".join(lines)


def evaluate_pairs(img_emb: np.ndarray, rec_emb: np.ndarray) -> dict[str, dict[str, float]]:
    return {
        "image_to_recipe": direction_metrics(rank_queries(img_emb, rec_emb)),
        "recipe_to_image": direction_metrics(rank_queries(rec_emb, img_emb)),
    }


def sampled_eval(img_emb, rec_emb, subset_size: int, n_subsets: int = 10, seed: int = 0) -> EvalReport:
    """Metrics on ``n_subsets`` random subsets of pairs, plus their mean.

    Subset s is drawn without replacement with seed ``seed + s``; indices are
    sorted so that a full-size subset reproduces direct evaluation exactly.
    MedR is aggregated as the mean over subsets.
    """
    img_emb = np.asarray(img_emb, dtype=np.float64)
    rec_emb = np.asarray(rec_emb, dtype=np.float64)
    n = len(img_emb)
    if len(rec_emb) != n:
        raise DimensionError(f"{n} image embeddings vs {len(rec_emb)} recipe embeddings")
    if not 1 <= subset_size <= n:
        raise EvaluationError(f"subset size {subset_size} not in [1, {n}]")
    if n_subsets < 1:
        raise EvaluationError("need at least one subset")
    seeds = [seed + s for s in range(n_subsets)]
    subsets = []
    for s in seeds:
        idx = np.sort(np.random.default_rng(s).choice(n, size=subset_size, replace=False))
        subsets.append(evaluate_pairs(img_emb[idx], rec_emb[idx]))
    mean = {d: {m: float(np.mean([sub[d][m] for sub in subsets])) for m in subsets[0][d]} for d in DIRECTIONS}
    return EvalReport(subset_size, seeds, subsets, mean)


def intra_class_distance_report(labels, img_emb, rec_emb) -> dict:
    """Mean paired image-recipe L2 distance per class, plus the mean over all pairs."""
    labels = np.asarray(labels)
    img_emb = np.asarray(img_emb, dtype=np.float64)
    rec_emb = np.asarray(rec_emb, dtype=np.float64)
    if img_emb.shape != rec_emb.shape or len(labels) != len(img_emb):
        raise DimensionError("labels, image and recipe embeddings must align")
    d = np.sqrt(((img_emb - rec_emb) ** 2).sum(axis=1))
    per_class = {}
    for k in np.unique(labels):
        sel = labels == k
        per_class[int(k)] = {"count": int(sel.sum()), "mean_distance": float(d[sel].mean())}
    return {"per_class": per_class, "overall_mean": float(d.mean()) if len(d) else float("nan"),
            "pairs": int(len(d))}


def format_distance_table(report: dict) -> str:
    lines = [f"{'class':>8} {'pairs':>6} {'mean L2':>10}"]
    for k, row in sorted(report["per_class"].items()):
        lines.append(f"{k:>8} {row['count']:>6} {row['mean_distance']:>10.4f}")
    lines.append(f"{'overall':>8} {report['pairs']:>6} {report['overall_mean']:>10.4f}")
    return "\n".join(lines)
