"""Non-intrusive speech quality (MOS) prediction toolkit.

Submodules:
    dsp       -- WAV loading, framing, log-magnitude spectrograms, normalization
    ratings   -- crowdsourced rating cleaning and MOS aggregation
    outliers  -- 1-D DBSCAN and isolation forest
    model     -- pyramid BLSTM encoder, self-attention decoder, training
    metrics   -- MAE, RMSE*, correlations, cubic mapping, splits, significance
    simulate  -- synthetic listening studies and degraded audio
    pipeline  -- glue used by the command line and the demos
"""
from . import dsp, metrics, outliers, ratings, simulate
from .dsp import AudioClip, FeatureStats, FrameConfig, Spectrogram, extract_features, load_audio
from .metrics import EvalReport, make_splits
from .model import MOSModel, ModelConfig, TrainConfig, load_model, predict, save_model, train
from .ratings import CleaningConfig, StimulusMOS, clean_ratings, ingest_ratings
from .simulate import StudyConfig, SynthAudioConfig, build_corpus, generate_study

__version__ = "0.1.0"
