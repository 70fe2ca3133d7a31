"""Prediction metrics, cubic score mapping, significance tests and data splits."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats


class UndefinedCorrelationError(ValueError):
    pass


def _pair(preds, targets):
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mae(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def rmse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def rmse_star(preds, targets, ci95=None, d: int = 0) -> float:
    """Epsilon-insensitive RMSE: errors inside each target's 95% CI count as zero.

    ``d`` is the number of fitted mapping coefficients (4 after a cubic
    mapping, 0 for native predictions) and reduces the degrees of freedom.
    """
    p, t = _pair(preds, targets)
    ci = np.zeros_like(p) if ci95 is None else np.asarray(ci95, dtype=np.float64)
    if ci.shape != p.shape:
        raise ValueError("ci95 length mismatch")
    if p.size <= d:
        raise ValueError(f"need more than {d} points, got {p.size}")
    perr = np.maximum(0.0, np.abs(p - t) - ci)
    return float(np.sqrt(np.sum(perr**2) / (p.size - d)))


def pcc(x, y) -> float:
    x, y = _pair(x, y)
    if x.size < 3:
        raise ValueError("correlation needs at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if denom == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0))


def rank_average(x) -> np.ndarray:
    """1-based ranks, ties receive the mean of the ranks they span."""
    return stats.rankdata(np.asarray(x, dtype=np.float64), method="average")


def srcc(x, y) -> float:
    x, y = _pair(x, y)
    return pcc(rank_average(x), rank_average(y))


def t_quantile(p: float, df) -> float:
    if df is None or math.isinf(df):
        return float(stats.norm.ppf(p))
    return float(stats.t.ppf(p, df))


# --- third-order mapping --------------------------------------------------

@dataclass
class Poly3Map:
    coefficients: np.ndarray  # a0..a3
    mapped: np.ndarray
    monotonic: bool

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=np.float64), self.coefficients)


def fit_poly3_map(raw, target) -> Poly3Map:
    """Least-squares cubic ``target ~ a0 + a1 x + a2 x^2 + a3 x^3``.

    Solved through the normal equations after scaling each Vandermonde column
    to unit norm.  ``monotonic`` reports whether the fitted curve is monotone
    over the observed raw range (no constraint is imposed).
    """
    x, y = _pair(raw, target)
    if x.size < 5:
        raise ValueError("cubic mapping needs at least 5 points")
    if np.ptp(x) == 0:
        raise ValueError("raw scores are constant")
    design = np.vander(x, 4, increasing=True)
    scale = np.linalg.norm(design, axis=0)
    a = design / scale
    gram = a.T @ a
    if np.linalg.cond(gram) > 1e14:
        raise np.linalg.LinAlgError("singular normal equations in cubic mapping")
    coef = np.linalg.solve(gram, a.T @ y) / scale
    fitted = Poly3Map(coef, np.zeros_like(x), True)
    fitted.mapped = fitted(x)
    grid = np.linspace(x.min(), x.max(), 512)
    slope = np.polynomial.polynomial.polyval(grid, np.polynomial.polynomial.polyder(coef))
    fitted.monotonic = bool(np.all(slope >= 0) or np.all(slope <= 0))
    return fitted


# --- significance ---------------------------------------------------------

def significance_test(abs_errors_a, abs_errors_b) -> dict:
    """Two-sided paired t-test and Wilcoxon signed-rank (normal approximation) on paired errors."""
    a, b = _pair(abs_errors_a, abs_errors_b)
    if a.size < 10:
        raise ValueError("significance testing needs at least 10 pairs")
    diff = a - b
    if np.all(diff == 0):
        return {"paired_t": 1.0, "wilcoxon": 1.0}
    if np.all(diff == diff[0]):
        # zero variance, non-zero shift: the t statistic is unbounded
        p_t = 0.0
    else:
        p_t = float(stats.ttest_rel(a, b).pvalue)
    p_w = float(stats.wilcoxon(diff, zero_method="wilcox", correction=False, method="approx").pvalue)
    return {"paired_t": p_t, "wilcoxon": p_w}


# --- splits ---------------------------------------------------------------

@dataclass
class Fold:
    train: list
    validation: list
    test: list


@dataclass
class SplitPlan:
    folds: list
    fractions: tuple = (0.7, 0.1, 0.2)
    seed: int = 0

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {"fractions": list(self.fractions), "seed": self.seed, "folds": [asdict(f) for f in self.folds]}


def _split_group(ids, rng, n_folds, val_frac):
    ids = [ids[i] for i in rng.permutation(len(ids))]
    blocks = np.array_split(np.arange(len(ids)), n_folds)
    n_val = int(math.floor(val_frac * len(ids)))
    folds = []
    for k, block in enumerate(blocks):
        rest = np.concatenate(blocks[k + 1:] + blocks[:k]) if n_folds > 1 else np.array([], int)
        folds.append(([ids[i] for i in rest[n_val:]], [ids[i] for i in rest[:n_val]], [ids[i] for i in block]))
    return folds


def make_splits(stimulus_ids: Sequence[str], seed: int = 0, n_folds: int = 5,
                fractions=(0.7, 0.1, 0.2), strata: Sequence[str] | None = None) -> SplitPlan:
    """Seeded train/validation/test folds with disjoint, exhaustive test blocks.

    The test block of each fold is one of ``n_folds`` contiguous slices of the
    shuffled ids; the validation set takes the next ``floor(val * n)`` ids in
    rotation and the training set keeps the rest (and any rounding remainder).
    ``strata`` (e.g. corpus tags) splits each group separately.
    """
    ids = list(stimulus_ids)
    if len(ids) < 10:
        raise ValueError("at least 10 stimuli are needed for a split")
    if len(set(ids)) != len(ids):
        raise ValueError("stimulus ids must be unique")
    if not math.isclose(sum(fractions), 1.0) or not math.isclose(fractions[2], 1.0 / n_folds):
        raise ValueError("test fraction must equal 1/n_folds and fractions must sum to 1")
    rng = np.random.default_rng(seed)
    groups = {}
    for i, sid in enumerate(ids):
        groups.setdefault(strata[i] if strata is not None else "", []).append(sid)
    folds = [Fold([], [], []) for _ in range(n_folds)]
    for key in sorted(groups):
        for fold, (tr, va, te) in zip(folds, _split_group(groups[key], rng, n_folds, fractions[1])):
            fold.train.extend(tr)
            fold.validation.extend(va)
            fold.test.extend(te)
    return SplitPlan(folds, tuple(fractions), seed)


# --- reports --------------------------------------------------------------

METRIC_NAMES = ("mae", "rmse_star", "pcc", "srcc")


def compute_metrics(preds, targets, ci95=None, d: int = 0) -> dict:
    return {
        "mae": mae(preds, targets),
        "rmse_star": rmse_star(preds, targets, ci95, d),
        "pcc": pcc(preds, targets),
        "srcc": srcc(preds, targets),
        "n": int(len(preds)),
    }


@dataclass
class EvalReport:
    corpus: str
    folds: list = field(default_factory=list)  # list of metric dicts
    p_values: dict = field(default_factory=dict)  # competitor -> {metric: {test: p}}

    @property
    def aggregate(self) -> dict:
        agg = {m: float(np.mean([f[m] for f in self.folds])) for m in METRIC_NAMES}
        agg["n"] = int(sum(f["n"] for f in self.folds))
        return agg

    def rows(self) -> list:
        rows = [dict(corpus=self.corpus, fold=k, **f) for k, f in enumerate(self.folds)]
        rows.append(dict(corpus=self.corpus, fold="mean", **self.aggregate))
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["corpus", "fold", *METRIC_NAMES, "n"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow(row)

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.rows()]
        if self.p_values:
            lines.append(json.dumps({"corpus": self.corpus, "p_values": self.p_values}, sort_keys=True))
        return "".join(line + "\n" for line in lines)


def evaluate_predictions(preds, labels, corpus: str = "all") -> dict:
    """Metrics of native predictions against StimulusMOS labels (RMSE* uses each label's CI, d = 0)."""
    targets = [m.mos for m in labels]
    ci = [m.ci95 for m in labels]
    return compute_metrics(preds, targets, ci, d=0)


def pool_metrics(per_corpus: dict, mode: str = "concatenate") -> dict:
    """Combine ``{corpus: (preds, labels)}`` by concatenating predictions or averaging metrics."""
    if mode == "concatenate":
        preds = np.concatenate([np.asarray(p) for p, _ in per_corpus.values()])
        labels = [m for _, ls in per_corpus.values() for m in ls]
        return evaluate_predictions(preds, labels)
    if mode == "average":
        each = [evaluate_predictions(p, ls) for p, ls in per_corpus.values()]
        out = {m: float(np.mean([e[m] for e in each])) for m in METRIC_NAMES}
        out["n"] = int(sum(e["n"] for e in each))
        return out
    raise ValueError(f"unknown pooling mode {mode!r}")


def format_table(rows: dict, p_values: dict | None = None) -> str:
    """Fixed-width comparison table; ``rows`` maps a model name to its metric dict."""
    width = max([len(name) for name in rows] + [14])
    lines = [f"{'':<{width}}  {'MAE':>6}  {'RMSE*':>6}  {'PCC':>6}  {'SRCC':>6}"]
    for name, m in rows.items():
        line = f"{name:<{width}}  {m['mae']:6.2f}  {m['rmse_star']:6.2f}  {m['pcc']:6.2f}  {m['srcc']:6.2f}"
        if p_values and name in p_values:
            pv = p_values[name]
            line += f"   p(t)={pv['paired_t']:.2g}  p(W)={pv['wilcoxon']:.2g}"
        lines.append(line)
    return "\n".join(lines)
