"""End-to-end helpers shared by the command line and the demo scripts."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import Spectrogram, read_features
from .metrics import EvalReport, Fold, SplitPlan, evaluate_predictions, make_splits, pool_metrics, significance_test
from .model import ABLATION_VARIANTS, ModelConfig, MOSModel, TrainConfig, predict, train
from .ratings import StimulusMOS


MIN_PAIRS = 10


class MissingInputError(FileNotFoundError):
    pass


@dataclass
class LabeledUtterance:
    features: Spectrogram
    label: StimulusMOS


def load_feature_dir(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingInputError(f"feature directory {directory} does not exist")
    return {p.stem: read_features(p) for p in sorted(directory.glob("*.feat"))}


def join_dataset(features: dict, labels) -> dict:
    """Pair each MOS label with its feature matrix; every label must have features."""
    missing = [m.stimulus_id for m in labels if m.stimulus_id not in features]
    if missing:
        raise MissingInputError(f"no features for {len(missing)} labelled stimuli, e.g. {missing[:5]}")
    return {m.stimulus_id: LabeledUtterance(features[m.stimulus_id], m) for m in labels}


def _items(data: dict, ids) -> list:
    return [(data[i].features, data[i].label.mos) for i in ids]


def dataset_splits(data: dict, seed: int, n_folds: int = 5, fractions=(0.7, 0.1, 0.2)) -> SplitPlan:
    ids = sorted(data)
    return make_splits(ids, seed=seed, n_folds=n_folds, fractions=fractions,
                       strata=[data[i].label.corpus for i in ids])


def train_fold(data: dict, fold: Fold, model_config: ModelConfig, train_config: TrainConfig):
    return train(model_config, _items(data, fold.train), _items(data, fold.validation), train_config)


def predict_ids(model: MOSModel, data: dict, ids) -> np.ndarray:
    return predict(model, [data[i].features for i in ids])


def evaluate_model(model: MOSModel, data: dict, ids, pooling: str = "concatenate") -> dict:
    """Metrics per corpus plus a pooled ``"all"`` entry; values are metric dicts."""
    ids = list(ids)
    preds = predict_ids(model, data, ids)
    by_corpus: dict = {}
    for sid, p in zip(ids, preds):
        label = data[sid].label
        group = by_corpus.setdefault(label.corpus or "all", ([], []))
        group[0].append(p)
        group[1].append(label)
    out = {c: evaluate_predictions(np.array(p), ls) for c, (p, ls) in sorted(by_corpus.items())}
    if len(by_corpus) > 1:
        out["all"] = pool_metrics({c: (np.array(p), ls) for c, (p, ls) in by_corpus.items()}, pooling)
    return out


def cross_validate(data: dict, plan: SplitPlan, model_config: ModelConfig, train_config: TrainConfig,
                   pooling: str = "concatenate", on_fold=None) -> dict:
    """Train and test every fold; returns ``{corpus: EvalReport}`` aggregated by fold mean."""
    reports: dict = {}
    for k, fold in enumerate(plan.folds):
        model, history = train_fold(data, fold, model_config, train_config)
        metrics = evaluate_model(model, data, fold.test, pooling)
        for corpus, m in metrics.items():
            reports.setdefault(corpus, EvalReport(corpus)).folds.append(m)
        if on_fold is not None:
            on_fold(k, model, history, metrics)
    return reports


def ablation(data: dict, fold: Fold, model_config: ModelConfig, train_config: TrainConfig,
             variants=tuple(ABLATION_VARIANTS), reference: str = "pBLSTM + Attn") -> dict:
    """Train each flag combination on the same split.

    Returns ``{variant: {"metrics", "predictions", "history", "model"}}`` and,
    for every variant other than ``reference``, paired p-values of its absolute
    errors against the reference variant's under ``"p_values"`` (NaN when the
    test set has fewer than 10 stimuli, too few for either test).
    """
    results = {}
    targets = np.array([data[i].label.mos for i in fold.test])
    for name in variants:
        pyramid, attention = ABLATION_VARIANTS[name]
        cfg = model_config.with_flags(pyramid, attention)
        model, history = train_fold(data, fold, cfg, train_config)
        preds = predict_ids(model, data, fold.test)
        results[name] = dict(metrics=evaluate_predictions(preds, [data[i].label for i in fold.test]),
                             predictions=preds, history=history, model=model)
    if reference in results:
        ref_err = np.abs(results[reference]["predictions"] - targets)
        for name, res in results.items():
            if name != reference:
                if len(targets) >= MIN_PAIRS:
                    res["p_values"] = significance_test(ref_err, np.abs(res["predictions"] - targets))
                else:
                    res["p_values"] = {"paired_t": float("nan"), "wilcoxon": float("nan")}
    return results
