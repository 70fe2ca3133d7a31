"""Synthetic listening studies and degradation-controlled audio.

Ratings follow a MUSHRA-like layout: every trial holds a hidden reference, a
low anchor and test stimuli, trials are grouped into HITs, and each HIT is
rated by a fixed number of workers.  Honest workers apply a personal affine
bias/scale plus Gaussian noise to the true quality; spammers answer uniformly
at random.  Audio is a harmonic, amplitude-modulated carrier buried in white
noise at an SNR that rises linearly with the target quality.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd

from .dsp import AudioClip
from .ratings import RATING_COLUMNS, CleaningConfig, StimulusMOS, clean_ratings


def _from_dict(cls, data: dict):
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class StudyConfig:
    n_stimuli: int = 900
    raters_per_stimulus: int = 5
    trials_per_hit: int = 15
    stimuli_per_trial: int = 3
    test_mos_range: tuple = (2.0, 6.0)
    reference_mos_range: tuple = (9.0, 10.0)
    anchor_mos_range: tuple = (0.0, 1.5)
    bias_std: float = 5.0
    scale_range: tuple = (0.85, 1.15)
    noise_std: float = 5.0
    spammer_fraction: float = 0.1
    unanswered_prob: float = 0.02
    corpus: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        for rng in (self.test_mos_range, self.reference_mos_range, self.anchor_mos_range):
            if not 0.0 <= rng[0] <= rng[1] <= 10.0:
                raise ValueError(f"MOS range {rng} must be ordered within [0, 10]")
        if not (0 <= self.spammer_fraction <= 1 and 0 <= self.unanswered_prob <= 1):
            raise ValueError("fractions must lie in [0, 1]")
        if self.stimuli_per_trial < 3 or self.raters_per_stimulus < 1 or self.trials_per_hit < 1:
            raise ValueError("a trial needs a reference, an anchor and at least one test stimulus")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class SynthAudioConfig:
    duration_s: float = 3.0
    snr_range_db: tuple = (-10.1, 11.4)
    quality_range: tuple = (0.0, 10.0)
    f0_range_hz: tuple = (100.0, 220.0)
    max_harmonic_hz: float = 4000.0
    modulation_hz: float = 4.0
    speech_level_dbfs: float = -30.0
    sample_rate_hz: int = 16000
    seed: int = 0

    def __post_init__(self):
        if not 3.0 <= self.duration_s <= 6.0:
            raise ValueError("duration must lie within [3, 6] seconds")
        if self.snr_range_db[0] > self.snr_range_db[1]:
            raise ValueError("snr range must be ordered")
        if self.quality_range[0] >= self.quality_range[1]:
            raise ValueError("quality range must be ordered")

    def snr_for_quality(self, q: float) -> float:
        lo_q, hi_q = self.quality_range
        lo, hi = self.snr_range_db
        return lo + (hi - lo) * (q - lo_q) / (hi_q - lo_q)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthAudioConfig":
        return _from_dict(cls, data)


@dataclass
class StudyData:
    ratings: pd.DataFrame
    truth: pd.DataFrame  # stimulus_id, condition, corpus, mos
    spammers: list


def _layout(cfg: StudyConfig, rng, test_mos):
    """List of trials, each a list of (stimulus_id, condition, true_mos)."""
    per_trial = cfg.stimuli_per_trial
    if test_mos is None:
        n_trials = -(-cfg.n_stimuli // per_trial)
        sizes = [per_trial] * n_trials
        sizes[-1] = cfg.n_stimuli - per_trial * (n_trials - 1)
        tests = iter(rng.uniform(*cfg.test_mos_range, size=cfg.n_stimuli))
    else:
        n_tests = len(test_mos)
        n_trials = -(-n_tests // (per_trial - 2))
        sizes = [per_trial] * n_trials
        sizes[-1] = 2 + n_tests - (per_trial - 2) * (n_trials - 1)
        tests = iter(test_mos)
    trials = []
    n_test = 0
    for j, size in enumerate(sizes):
        hit_start = j % cfg.trials_per_hit == 0
        ref = cfg.reference_mos_range[1] if hit_start else rng.uniform(*cfg.reference_mos_range)
        anchor = cfg.anchor_mos_range[0] if hit_start else rng.uniform(*cfg.anchor_mos_range)
        trial = [(f"t{j:04d}_ref", "reference", float(ref)), (f"t{j:04d}_anc", "anchor", float(anchor))][:size]
        for _ in range(size - 2):
            trial.append((f"s{n_test:05d}", "test", float(next(tests))))
            n_test += 1
        trials.append(trial)
    return trials


def generate_study(cfg: StudyConfig = StudyConfig(), test_mos=None, test_ids=None) -> StudyData:
    """Simulate a crowdsourced study.

    The first trial of every HIT pins its reference and anchor to the top and
    bottom of their ranges, so each worker's rating scale spans the full
    0..10 range of true quality.  ``test_mos`` optionally fixes the true
    quality of the test stimuli (``n_stimuli`` is then ignored) and
    ``test_ids`` renames them.
    """
    rng = np.random.default_rng(cfg.seed)
    trials = _layout(cfg, rng, test_mos)
    if test_ids is not None:
        names = iter(test_ids)
        trials = [[(next(names), c, m) if c == "test" else (s, c, m) for s, c, m in t] for t in trials]
    hits = [trials[i:i + cfg.trials_per_hit] for i in range(0, len(trials), cfg.trials_per_hit)]
    workers = [(h, r) for h in range(len(hits)) for r in range(cfg.raters_per_stimulus)]
    n_spam = int(round(cfg.spammer_fraction * len(workers)))
    spam_idx = set(rng.permutation(len(workers))[:n_spam].tolist())
    rows, spammers = [], []
    for w, (h, r) in enumerate(workers):
        worker_id = f"w{h:04d}_{r}"
        spammer = w in spam_idx
        if spammer:
            spammers.append(worker_id)
        bias = rng.normal(0.0, cfg.bias_std) if cfg.bias_std > 0 else 0.0
        scale = rng.uniform(*cfg.scale_range)
        for j, trial in enumerate(hits[h]):
            for stim, condition, mos in trial:
                if spammer:
                    score = rng.uniform(0.0, 100.0)
                else:
                    noise = rng.normal(0.0, cfg.noise_std) if cfg.noise_std > 0 else 0.0
                    score = float(np.clip(scale * 10.0 * mos + bias + noise, 0.0, 100.0))
                if cfg.unanswered_prob > 0 and rng.random() < cfg.unanswered_prob:
                    score = math.nan
                rows.append((worker_id, f"h{h:04d}", f"h{h:04d}_t{j:02d}", stim, condition, cfg.corpus, score))
    ratings = pd.DataFrame(rows, columns=RATING_COLUMNS)
    truth = pd.DataFrame([(s, c, cfg.corpus, m) for t in trials for s, c, m in t],
                         columns=["stimulus_id", "condition", "corpus", "mos"])
    return StudyData(ratings, truth, spammers)


def _carrier(n: int, fs: int, cfg: SynthAudioConfig, rng) -> np.ndarray:
    t = np.arange(n) / fs
    f0 = rng.uniform(*cfg.f0_range_hz)
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / fs
    n_harm = max(1, int(cfg.max_harmonic_hz // (f0 * 1.03)))
    tilt = rng.uniform(0.8, 1.2)
    voiced = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k**tilt for k in range(1, n_harm + 1))
    # syllable-rate envelope with occasional pauses
    env = 0.5 * (1.0 + np.sin(2 * np.pi * cfg.modulation_hz * t + rng.uniform(0, 2 * np.pi)))
    env *= 0.6 + 0.4 * np.sin(2 * np.pi * 0.5 * t + rng.uniform(0, 2 * np.pi)) ** 2
    return voiced * env


def generate_synthetic_audio(q: float, cfg: SynthAudioConfig = SynthAudioConfig(), clip_id: str = "synth",
                             index: int = 0, return_stems: bool = False):
    """Speech-like carrier plus white noise at an SNR mapped affinely from quality ``q``.

    The carrier is set to an RMS of ``cfg.speech_level_dbfs`` and the noise is
    added on top, so the noise floor (not the speech) moves with ``q``.  With
    ``return_stems`` the speech and noise components are returned as well.
    """
    lo, hi = cfg.quality_range
    if not lo <= q <= hi:
        raise ValueError(f"quality {q} outside {cfg.quality_range}")
    rng = np.random.default_rng([cfg.seed, index])
    n = int(round(cfg.duration_s * cfg.sample_rate_hz))
    speech = _carrier(n, cfg.sample_rate_hz, cfg, rng)
    speech *= 10.0 ** (cfg.speech_level_dbfs / 20.0) / math.sqrt(np.mean(speech**2))
    noise = rng.standard_normal(n)
    snr = cfg.snr_for_quality(q)
    noise *= math.sqrt(np.mean(speech**2) / (np.mean(noise**2) * 10.0 ** (snr / 10.0)))
    mix = speech + noise
    if np.max(np.abs(mix)) >= 1.0:
        raise ValueError(f"mixture clips at q={q}; lower speech_level_dbfs")
    clip = AudioClip(clip_id, cfg.sample_rate_hz, mix)
    if return_stems:
        return clip, speech, noise
    return clip


def measured_snr_db(speech: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(float(np.sum(speech**2)) / float(np.sum(noise**2)))


@dataclass
class CorpusItem:
    clip: AudioClip
    label: StimulusMOS
    quality: float


def build_corpus(n: int, audio_cfg: SynthAudioConfig = SynthAudioConfig(),
                 study_cfg: StudyConfig | None = StudyConfig(),
                 cleaning_cfg: CleaningConfig = CleaningConfig()) -> list:
    """``n`` synthetic clips with MOS labels.

    Target qualities are an evenly spaced grid over the study's test range,
    shuffled with the audio seed.  When ``study_cfg`` is given, labels come
    from simulating ratings of these clips and cleaning them; otherwise the
    target quality itself is the label.
    """
    if n < 10:
        raise ValueError("a corpus needs at least 10 clips")
    lo, hi = (study_cfg or StudyConfig()).test_mos_range
    rng = np.random.default_rng([audio_cfg.seed, n])
    qualities = np.linspace(lo, hi, n)[rng.permutation(n)]
    ids = [f"clip{i:05d}" for i in range(n)]
    corpus_tag = study_cfg.corpus if study_cfg is not None else "synthetic"
    if study_cfg is None:
        labels = {i: StimulusMOS(i, float(q), 1, 0.0, 0.0, corpus_tag, "test") for i, q in zip(ids, qualities)}
    else:
        study = generate_study(study_cfg, test_mos=qualities, test_ids=ids)
        cleaned = clean_ratings(study.ratings, cleaning_cfg)
        labels = {m.stimulus_id: m for m in cleaned.mos}
    items = []
    for i, (sid, q) in enumerate(zip(ids, qualities)):
        if sid not in labels:
            continue
        items.append(CorpusItem(generate_synthetic_audio(float(q), audio_cfg, sid, index=i), labels[sid], float(q)))
    return items
