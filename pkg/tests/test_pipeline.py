import numpy as np
import pytest

from mosqa import dsp, pipeline
from mosqa.model import ModelConfig, TrainConfig
from mosqa.ratings import StimulusMOS


def _data(n=20, corpora=("cosine",), bins=5, seed=0):
    rng = np.random.default_rng(seed)
    data = {}
    for i in range(n):
        sid = f"s{i:03d}"
        mos = float(rng.uniform(1, 5))
        spec = dsp.Spectrogram(sid, rng.normal(mos, 0.1, size=(int(rng.integers(6, 12)), bins)))
        data[sid] = pipeline.LabeledUtterance(spec, StimulusMOS(sid, mos, 5, 0.2, 0.1, corpora[i % len(corpora)]))
    return data


TINY_MODEL = dict(input_dim=5, base_blstm_units=3, pyramid_units=(2, 2), attention_dim=2, fc_units=2)


def test_load_feature_dir_and_join(tmp_path):
    spec = dsp.Spectrogram("a", np.ones((3, 4)))
    dsp.write_features(spec, tmp_path / "a.feat")
    feats = pipeline.load_feature_dir(tmp_path)
    assert list(feats) == ["a"]
    joined = pipeline.join_dataset(feats, [StimulusMOS("a", 3.0, 5, 0.1, 0.1)])
    assert joined["a"].label.mos == 3.0
    with pytest.raises(pipeline.MissingInputError):
        pipeline.join_dataset(feats, [StimulusMOS("b", 3.0, 5, 0.1, 0.1)])
    with pytest.raises(pipeline.MissingInputError):
        pipeline.load_feature_dir(tmp_path / "missing")


def test_dataset_splits_stratify_by_corpus():
    data = _data(40, corpora=("cosine", "voices"))
    plan = pipeline.dataset_splits(data, seed=1)
    for fold in plan.folds:
        corpora = [data[i].label.corpus for i in fold.test]
        assert corpora.count("cosine") == corpora.count("voices") == 4


def test_evaluate_model_pools_corpora():
    data = _data(24, corpora=("cosine", "voices"))
    plan = pipeline.dataset_splits(data, seed=0)
    model, _ = pipeline.train_fold(data, plan.folds[0], ModelConfig(**TINY_MODEL), TrainConfig(epochs=1))
    out = pipeline.evaluate_model(model, data, sorted(data))
    assert set(out) == {"cosine", "voices", "all"}
    assert out["all"]["n"] == 24 == out["cosine"]["n"] + out["voices"]["n"]


def test_cross_validate_calls_back_per_fold():
    data = _data(20)
    plan = pipeline.dataset_splits(data, seed=0)
    seen = []
    reports = pipeline.cross_validate(data, plan, ModelConfig(**TINY_MODEL), TrainConfig(epochs=1),
                                      on_fold=lambda k, *_: seen.append(k))
    assert seen == [0, 1, 2, 3, 4]
    assert len(reports["cosine"].folds) == 5


def test_ablation_variants_and_p_values():
    data = _data(50)
    fold = pipeline.dataset_splits(data, seed=0).folds[0]
    res = pipeline.ablation(data, fold, ModelConfig(**TINY_MODEL), TrainConfig(epochs=1))
    assert list(res) == ["BLSTM", "pBLSTM", "BLSTM + Attn", "pBLSTM + Attn"]
    assert "p_values" not in res["pBLSTM + Attn"]
    for name in ("BLSTM", "pBLSTM", "BLSTM + Attn"):
        assert set(res[name]["p_values"]) == {"paired_t", "wilcoxon"}
        assert all(0 <= p <= 1 for p in res[name]["p_values"].values())
    # flags actually differ between variants
    assert res["BLSTM"]["model"].config.use_pyramid is False
    assert res["pBLSTM + Attn"]["model"].config.use_attention is True


def test_ablation_small_test_set_gives_nan_p_values():
    data = _data(20)
    fold = pipeline.dataset_splits(data, seed=0).folds[0]
    res = pipeline.ablation(data, fold, ModelConfig(**TINY_MODEL), TrainConfig(epochs=1),
                            variants=("BLSTM", "pBLSTM + Attn"))
    assert np.isnan(res["BLSTM"]["p_values"]["paired_t"])
