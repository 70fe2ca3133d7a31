"""Cleaning crowdsourced quality ratings into per-stimulus MOS labels.

The chain is fixed: worker rejection, per-(stimulus, condition) z-score
filtering, per-worker min-max rescaling to 0..10, a DBSCAN + isolation forest
ensemble per stimulus, and averaging.  Tables are pandas DataFrames with the
columns of :data:`RATING_COLUMNS`; unanswered trials carry ``NaN`` scores.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .metrics import t_quantile
from .outliers import NOISE, dbscan_1d, isolation_forest_1d

RATING_COLUMNS = ["worker_id", "hit_id", "trial_id", "stimulus_id", "condition", "corpus", "raw_score"]
CONDITIONS = ("reference", "anchor", "test")
CORPORA = ("cosine", "voices", "synthetic")


class RatingsFormatError(ValueError):
    """Malformed ratings CSV: bad header or row, out-of-range score, unknown enum value, duplicates."""


@dataclass(frozen=True)
class RatingRecord:
    worker_id: str
    hit_id: str
    trial_id: str
    stimulus_id: str
    condition: str
    corpus: str
    raw_score: float  # NaN when unanswered

    @property
    def answered(self) -> bool:
        return not math.isnan(self.raw_score)


@dataclass(frozen=True)
class CleaningConfig:
    z_threshold: float = 2.5
    max_unanswered_frac: float = 0.2
    min_reference_win_rate: float = 0.8
    dbscan_eps: float = 1.0
    dbscan_min_pts: int = 3
    iforest_trees: int = 100
    iforest_subsample: int = 256
    iforest_threshold: float = 0.6
    seed: int = 0
    profile: str = "practical"

    def __post_init__(self):
        if self.z_threshold <= 0:
            raise ValueError("z_threshold must be positive")
        if not 0 <= self.max_unanswered_frac <= 1:
            raise ValueError("max_unanswered_frac must lie in [0, 1]")
        if not 0 <= self.min_reference_win_rate <= 1:
            raise ValueError("min_reference_win_rate must lie in [0, 1]")
        if self.dbscan_eps <= 0 or self.dbscan_min_pts < 1 or self.iforest_trees < 1:
            raise ValueError("invalid outlier-detector parameters")
        if self.profile not in ("practical", "fidelity"):
            raise ValueError(f"unknown profile {self.profile!r}")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "CleaningConfig":
        """``fidelity`` mirrors scikit-learn defaults (eps 0.5, min_samples 5, score cut 0.5)."""
        base = dict(profile=profile)
        if profile == "fidelity":
            base.update(dbscan_eps=0.5, dbscan_min_pts=5, iforest_threshold=0.5)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CleaningConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown CleaningConfig keys: {sorted(unknown)}")
        data = dict(data)
        return cls.for_profile(data.pop("profile", "practical"), **data)


@dataclass
class StimulusMOS:
    stimulus_id: str
    mos: float
    n_ratings: int
    std: float
    ci95: float
    corpus: str = ""
    condition: str = ""


@dataclass
class RejectionReport:
    entries: list = field(default_factory=list)

    def add(self, stage: str, reason: str, worker_id: str | None = None, **detail) -> None:
        entry = {"stage": stage, "reason": reason}
        if worker_id is not None:
            entry["worker_id"] = worker_id
        entry.update(detail)
        self.entries.append(entry)

    def workers(self, stage: str | None = None) -> list:
        return [e["worker_id"] for e in self.entries
                if "worker_id" in e and (stage is None or e["stage"] == stage)]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


# --- ingestion ------------------------------------------------------------

def records_to_frame(records) -> pd.DataFrame:
    rows = [asdict(r) if isinstance(r, RatingRecord) else dict(r) for r in records]
    table = pd.DataFrame(rows, columns=RATING_COLUMNS)
    table["raw_score"] = table["raw_score"].astype(np.float64)
    return table


def parse_rating_row(row: list, line: int) -> RatingRecord:
    if len(row) != len(RATING_COLUMNS):
        raise RatingsFormatError(f"line {line}: expected {len(RATING_COLUMNS)} fields, got {len(row)}")
    worker, hit, trial, stim, condition, corpus, score = (v.strip() for v in row)
    if not all((worker, hit, trial, stim)):
        raise RatingsFormatError(f"line {line}: empty identifier")
    if condition not in CONDITIONS:
        raise RatingsFormatError(f"line {line}: unknown condition {condition!r}")
    if corpus not in CORPORA:
        raise RatingsFormatError(f"line {line}: unknown corpus {corpus!r}")
    if score == "":
        value = math.nan
    else:
        try:
            value = float(score)
        except ValueError:
            raise RatingsFormatError(f"line {line}: score {score!r} is not a number") from None
        if not 0.0 <= value <= 100.0:
            raise RatingsFormatError(f"line {line}: score {value} outside [0, 100]")
    return RatingRecord(worker, hit, trial, stim, condition, corpus, value)


def ingest_ratings(path) -> pd.DataFrame:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RATING_COLUMNS:
            raise RatingsFormatError(f"{path}: header must be {','.join(RATING_COLUMNS)}")
        records = [parse_rating_row(row, n) for n, row in enumerate(reader, start=2) if row]
    table = records_to_frame(records)
    dup = table.duplicated(["worker_id", "stimulus_id"], keep=False)
    if dup.any():
        pairs = sorted(set(zip(table.loc[dup, "worker_id"], table.loc[dup, "stimulus_id"])))
        raise RatingsFormatError(f"duplicate (worker, stimulus) ratings: {pairs}")
    return table


def write_ratings(table: pd.DataFrame, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RATING_COLUMNS)
        for row in table[RATING_COLUMNS].itertuples(index=False):
            score = "" if math.isnan(row.raw_score) else repr(float(row.raw_score))
            writer.writerow([*row[:-1], score])


# --- cleaning stages ------------------------------------------------------

def reference_win_rate(rows: pd.DataFrame) -> float | None:
    """Fraction of a worker's trials in which the hidden reference outscored the anchor."""
    pairs = rows.pivot_table(index="trial_id", columns="condition", values="raw_score", aggfunc="mean")
    if "reference" not in pairs or "anchor" not in pairs:
        return None
    pairs = pairs[["reference", "anchor"]].dropna()
    if pairs.empty:
        return None
    return float((pairs["reference"] > pairs["anchor"]).mean())


def reject_workers(table: pd.DataFrame, cfg: CleaningConfig = CleaningConfig()):
    """Drop every record of workers who skipped too much, rated constantly, or failed the reference check.

    The reference check fails when the mean reference rating does not exceed
    the mean anchor rating, or when the reference beats the anchor of the
    same trial in fewer than ``cfg.min_reference_win_rate`` of the trials.
    """
    report = RejectionReport()
    rejected = []
    for worker, rows in table.groupby("worker_id", sort=True):
        unanswered = rows["raw_score"].isna()
        per_hit = unanswered.groupby(rows["hit_id"]).mean()
        answered = rows.loc[~unanswered]
        if (per_hit > cfg.max_unanswered_frac).any():
            worst = per_hit.idxmax()
            report.add("reject", "unanswered", worker, hit_id=worst, fraction=float(per_hit[worst]))
        elif answered["raw_score"].nunique() <= 1:
            report.add("reject", "constant", worker, n_answered=int(len(answered)))
        else:
            by_cond = answered.groupby("condition")["raw_score"].mean()
            if "reference" not in by_cond or "anchor" not in by_cond:
                continue
            win_rate = reference_win_rate(answered)
            if by_cond["reference"] <= by_cond["anchor"] or (
                    win_rate is not None and win_rate < cfg.min_reference_win_rate):
                report.add("reject", "random_scoring", worker, mean_reference=float(by_cond["reference"]),
                           mean_anchor=float(by_cond["anchor"]), reference_win_rate=win_rate)
            else:
                continue
        rejected.append(worker)
    return table.loc[~table["worker_id"].isin(rejected)].copy(), report


def zscore_filter(table: pd.DataFrame, z_threshold: float = 2.5) -> pd.DataFrame:
    """Remove unanswered records and answered ratings with ``|z| > z_threshold`` in their group.

    Groups are (stimulus, condition) and use the population standard deviation;
    groups with fewer than three ratings or zero spread are left alone.
    """
    answered = table.loc[table["raw_score"].notna()]
    grouped = answered.groupby(["stimulus_id", "condition"])["raw_score"]
    mean = grouped.transform("mean")
    std = grouped.transform(lambda s: s.std(ddof=0))
    size = grouped.transform("size")
    exempt = (size < 3) | (std == 0)
    z = (answered["raw_score"] - mean).abs() / std.where(~exempt, 1.0)
    keep = exempt | (z <= z_threshold)
    return answered.loc[keep].copy()


def rescale_workers(table: pd.DataFrame, report: RejectionReport | None = None) -> pd.DataFrame:
    """Per-worker min-max mapping of surviving raw scores to ``scaled_score`` in [0, 10]."""
    table = table.loc[table["raw_score"].notna()].copy()
    lo = table.groupby("worker_id")["raw_score"].transform("min")
    hi = table.groupby("worker_id")["raw_score"].transform("max")
    flat = hi == lo
    if flat.any() and report is not None:
        for worker in sorted(table.loc[flat, "worker_id"].unique()):
            report.add("rescale", "zero_range", worker)
    table = table.loc[~flat]
    lo, hi = lo[~flat], hi[~flat]
    table["scaled_score"] = 10.0 * (table["raw_score"] - lo) / (hi - lo)
    return table


def _stimulus_seed(seed: int, stimulus_id: str) -> list:
    return [seed, zlib.crc32(stimulus_id.encode())]


def detect_outliers(points, cfg: CleaningConfig, seed=0):
    """Per-point flags ``(dbscan_noise, iforest_flag, removed)`` for one rating group."""
    x = np.asarray(points, dtype=np.float64)
    noise = dbscan_1d(x, cfg.dbscan_eps, cfg.dbscan_min_pts) == NOISE
    if x.size >= 2:
        scores = isolation_forest_1d(x, cfg.iforest_trees, cfg.iforest_subsample, seed)
    else:
        scores = np.zeros(x.size)
    flagged = scores >= cfg.iforest_threshold
    return noise, flagged, noise & flagged, scores


def ensemble_outlier_removal(table: pd.DataFrame, cfg: CleaningConfig = CleaningConfig(), audit=None):
    """Discard a scaled rating only when DBSCAN calls it noise and its isolation score passes the cut.

    If ``audit`` is a list, one dict per rating with both detector outcomes is appended to it.
    """
    keep = pd.Series(True, index=table.index)
    for stim, rows in table.groupby("stimulus_id", sort=True):
        noise, flagged, removed, scores = detect_outliers(
            rows["scaled_score"].to_numpy(), cfg, _stimulus_seed(cfg.seed, stim))
        keep.loc[rows.index[removed]] = False
        if audit is not None:
            for i, idx in enumerate(rows.index):
                audit.append(dict(stimulus_id=stim, worker_id=rows.at[idx, "worker_id"],
                                  scaled_score=float(rows.at[idx, "scaled_score"]),
                                  dbscan_noise=bool(noise[i]), iforest_score=float(scores[i]),
                                  removed=bool(removed[i])))
    return table.loc[keep].copy()


def compute_mos(table: pd.DataFrame, all_stimuli=None, report: RejectionReport | None = None) -> list:
    """Average surviving scaled ratings per stimulus, with sample std and a t-based 95% CI half-width."""
    out = []
    for stim, rows in table.groupby("stimulus_id", sort=True):
        x = rows["scaled_score"].to_numpy(dtype=np.float64)
        n = x.size
        std = float(np.std(x, ddof=1)) if n > 1 else 0.0
        ci95 = t_quantile(0.975, n - 1) * std / math.sqrt(n) if n > 1 else 0.0
        out.append(StimulusMOS(stim, float(np.mean(x)), n, std, float(ci95),
                               rows["corpus"].iat[0], rows["condition"].iat[0]))
    if all_stimuli is not None and report is not None:
        for stim in sorted(set(all_stimuli) - set(table["stimulus_id"])):
            report.add("mos", "no_surviving_ratings", stimulus_id=stim)
    return out


@dataclass
class CleaningResult:
    mos: list
    report: RejectionReport
    stages: dict  # stage name -> table after that stage
    audit: list

    def mos_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(m) for m in self.mos])


def clean_ratings(table: pd.DataFrame, cfg: CleaningConfig = CleaningConfig()) -> CleaningResult:
    """reject -> z-score -> rescale -> ensemble -> MOS."""
    stages = {"input": table}
    kept, report = reject_workers(table, cfg)
    stages["reject"] = kept
    stages["zscore"] = zscore_filter(kept, cfg.z_threshold)
    stages["rescale"] = rescale_workers(stages["zscore"], report)
    audit: list = []
    stages["ensemble"] = ensemble_outlier_removal(stages["rescale"], cfg, audit)
    for row in audit:
        if row["removed"]:
            report.add("ensemble", "outlier", row["worker_id"], stimulus_id=row["stimulus_id"],
                       scaled_score=row["scaled_score"], iforest_score=row["iforest_score"])
    mos = compute_mos(stages["ensemble"], table["stimulus_id"].unique(), report)
    return CleaningResult(mos, report, stages, audit)


def write_mos_csv(mos: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stimulus_id", "corpus", "mos", "n_ratings", "std", "ci95"])
        for m in mos:
            writer.writerow([m.stimulus_id, m.corpus, repr(m.mos), m.n_ratings, repr(m.std), repr(m.ci95)])


def read_mos_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(StimulusMOS(row["stimulus_id"], float(row["mos"]), int(row["n_ratings"]),
                                   float(row["std"]), float(row["ci95"]), row.get("corpus", "")))
    return out
