"""Command-line entry point: ``mosqa <command> ...``.

Exit codes: 0 success, 1 unexpected failure, 2 bad usage or configuration,
3 unparseable input file, 4 missing input, 5 dimension mismatch, 6 training
diverged.  On failure one JSON object describing the error goes to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dsp, ratings
from .dsp import AudioFormatError, FeatureFileError, FrameConfig
from .metrics import EvalReport, format_table
from .model import (ABLATION_VARIANTS, CheckpointError, DimensionMismatchError, ModelConfig, TrainConfig,
                    TrainingDiverged, load_model, predict, save_model)
from .pipeline import (MissingInputError, ablation, cross_validate, dataset_splits, evaluate_model, join_dataset,
                       load_feature_dir, train_fold)
from .simulate import StudyConfig, SynthAudioConfig, build_corpus, generate_study

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_PARSE, EXIT_MISSING, EXIT_DIMENSION, EXIT_DIVERGED = range(7)

CONFIG_SECTIONS = {"seed", "frame", "cleaning", "model", "train", "study", "audio", "split"}
SPLIT_KEYS = {"n_folds", "fractions", "pooling", "fold"}


class ConfigError(ValueError):
    pass


class CommandError(RuntimeError):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _section(cls, data: dict, name: str, **fixed):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    values.update(fixed)
    return values


class RunConfig:
    """Resolved configuration: file contents, then command-line overrides."""

    def __init__(self, raw: dict | None = None, seed: int | None = None):
        raw = dict(raw or {})
        unknown = set(raw) - CONFIG_SECTIONS
        if unknown:
            raise ConfigError(f"unknown configuration sections: {sorted(unknown)}")
        self.seed = int(seed if seed is not None else raw.get("seed", 0))
        frame = _section(FrameConfig, raw.get("frame", {}), "frame")
        self.frame = FrameConfig(**frame)
        cleaning = _section(ratings.CleaningConfig, raw.get("cleaning", {}), "cleaning")
        cleaning.setdefault("seed", self.seed)
        self.cleaning = ratings.CleaningConfig.from_dict(cleaning)
        model = dict(raw.get("model", {}))
        model.pop("input_dim", None)
        self.model = _section(ModelConfig, model, "model")
        self.model.setdefault("seed", self.seed)
        train = _section(TrainConfig, raw.get("train", {}), "train")
        train.setdefault("seed", self.seed)
        self.train = TrainConfig(**train)
        study = _section(StudyConfig, raw.get("study", {}), "study")
        study.setdefault("seed", self.seed)
        self.study = StudyConfig(**study)
        audio = _section(SynthAudioConfig, raw.get("audio", {}), "audio")
        audio.setdefault("seed", self.seed)
        self.audio = SynthAudioConfig(**audio)
        split = dict(raw.get("split", {}))
        if set(split) - SPLIT_KEYS:
            raise ConfigError(f"unknown keys in [split]: {sorted(set(split) - SPLIT_KEYS)}")
        self.split = {"n_folds": 5, "fractions": [0.7, 0.1, 0.2], "pooling": "concatenate", "fold": 0}
        self.split.update(split)
        if self.split["pooling"] not in ("concatenate", "average"):
            raise ConfigError("split.pooling must be 'concatenate' or 'average'")

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, **self.model)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "frame": asdict(self.frame),
            "cleaning": self.cleaning.to_dict(),
            "model": {k: list(v) if isinstance(v, tuple) else v for k, v in self.model.items()},
            "train": self.train.to_dict(),
            "study": self.study.to_dict(),
            "audio": self.audio.to_dict(),
            "split": self.split,
        }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_dataset(features_dir, mos_csv):
    if not Path(mos_csv).is_file():
        raise MissingInputError(f"MOS table {mos_csv} does not exist")
    labels = ratings.read_mos_csv(mos_csv)
    return join_dataset(load_feature_dir(features_dir), labels)


def _input_dim(data: dict) -> int:
    dims = {u.features.n_bins for u in data.values()}
    if len(dims) != 1:
        raise DimensionMismatchError(f"feature files disagree on bin count: {sorted(dims)}")
    return dims.pop()


# --- commands -------------------------------------------------------------

def cmd_features(args, cfg: RunConfig, out: Path) -> int:
    audio_dir = Path(args.audio_dir)
    wavs = sorted(audio_dir.glob("*.wav")) if audio_dir.is_dir() else []
    if not wavs:
        raise CommandError(EXIT_MISSING, "missing_input", f"no WAV files in {audio_dir}")
    train_ids = None
    if args.train_list:
        train_ids = set(Path(args.train_list).read_text().split())
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    errors, specs = [], {}
    for path in wavs:
        try:
            spec = dsp.extract_features(dsp.load_audio(path), cfg.frame)
        except (AudioFormatError, ValueError) as exc:
            errors.append({"file": str(path), "error": str(exc)})
            continue
        dsp.write_features(spec, feat_dir / f"{spec.id}.feat")
        if args.csv:
            dsp.export_csv(spec, feat_dir / f"{spec.id}.csv")
        specs[spec.id] = spec
    chosen = [s for sid, s in specs.items() if train_ids is None or sid in train_ids]
    if chosen:
        dsp.write_stats(dsp.compute_feature_stats(chosen), out / "stats.bin")
    print(f"wrote {len(specs)} feature files to {feat_dir}")
    if errors:
        for e in errors:
            print(json.dumps(e), file=sys.stderr)
        raise CommandError(EXIT_PARSE, "audio_errors", f"{len(errors)} file(s) failed")
    return EXIT_OK


def cmd_clean(args, cfg: RunConfig, out: Path) -> int:
    if not Path(args.ratings).is_file():
        raise MissingInputError(f"ratings file {args.ratings} does not exist")
    table = ratings.ingest_ratings(args.ratings)
    result = ratings.clean_ratings(table, cfg.cleaning)
    ratings.write_mos_csv(result.mos, out / "mos.csv")
    result.report.write(out / "rejections.jsonl")
    with open(out / "audit.jsonl", "w") as fh:
        for stage in ("input", "reject", "zscore", "rescale", "ensemble"):
            fh.write(json.dumps({"stage": stage, "records": int(len(result.stages[stage]))}) + "\n")
        for row in result.audit:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"{len(result.mos)} stimuli, {len(result.report.workers('reject'))} workers rejected")
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig, out: Path) -> int:
    study = generate_study(cfg.study)
    ratings.write_ratings(study.ratings, out / "ratings.csv")
    study.truth.to_csv(out / "truth.csv", index=False, float_format="%.17g")
    (out / "spammers.txt").write_text("".join(w + "\n" for w in study.spammers))
    if args.corpus_size:
        corpus_dir = out / "corpus"
        wav_dir = corpus_dir / "wav"
        wav_dir.mkdir(parents=True, exist_ok=True)
        items = build_corpus(args.corpus_size, cfg.audio, cfg.study, cfg.cleaning)
        for item in items:
            dsp.save_wav(item.clip, wav_dir / f"{item.clip.id}.wav")
        ratings.write_mos_csv([item.label for item in items], corpus_dir / "mos.csv")
        with open(corpus_dir / "quality.csv", "w") as fh:
            fh.write("stimulus_id,quality,snr_db\n")
            for item in items:
                fh.write(f"{item.clip.id},{item.quality!r},{cfg.audio.snr_for_quality(item.quality)!r}\n")
    print(f"simulated {len(study.truth)} stimuli rated by {study.ratings['worker_id'].nunique()} workers")
    return EXIT_OK


def _fold(cfg: RunConfig, data: dict, index):
    plan = dataset_splits(data, cfg.seed, cfg.split["n_folds"], tuple(cfg.split["fractions"]))
    k = cfg.split["fold"] if index is None else index
    return plan, plan.folds[k]


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    data = _load_dataset(args.features, args.mos)
    plan, fold = _fold(cfg, data, args.fold)
    model_cfg = cfg.model_config(_input_dim(data))
    if args.variant:
        model_cfg = model_cfg.with_flags(*ABLATION_VARIANTS[args.variant])
    model, history = train_fold(data, fold, model_cfg, cfg.train)
    save_model(model, out / "model.bin")
    history.to_csv(out / "history.csv")
    _write_json(out / "splits.json", plan.to_dict())
    print(f"best epoch {history.best_epoch}, validation MSE {history.val_mse[history.best_epoch - 1]:.4f}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig, out: Path) -> int:
    model = load_model(args.model)
    rows = []
    for item in args.inputs:
        path = Path(item)
        paths = sorted(list(path.glob("*.wav")) + list(path.glob("*.feat"))) if path.is_dir() else [path]
        for p in paths:
            if not p.exists():
                raise MissingInputError(f"{p} does not exist")
            spec = dsp.read_features(p) if p.suffix == ".feat" else dsp.extract_features(dsp.load_audio(p), cfg.frame)
            rows.append((spec.id, float(predict(model, [spec])[0])))
    with open(out / "predictions.csv", "w") as fh:
        fh.write("stimulus_id,predicted_mos\n")
        for sid, value in rows:
            fh.write(f"{sid},{value!r}\n")
    for sid, value in rows:
        print(f"{sid}\t{value:.3f}")
    return EXIT_OK


def _report_outputs(reports: dict, out: Path, stem: str) -> None:
    with open(out / f"{stem}.jsonl", "w") as fh:
        for rep in reports.values():
            fh.write(rep.to_jsonl())
    rows = [row for rep in reports.values() for row in rep.rows()]
    with open(out / f"{stem}.csv", "w") as fh:
        fh.write("corpus,fold,mae,rmse_star,pcc,srcc,n\n")
        for r in rows:
            fh.write(f"{r['corpus']},{r['fold']},{r['mae']!r},{r['rmse_star']!r},{r['pcc']!r},{r['srcc']!r},{r['n']}\n")


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> int:
    model = load_model(args.model)
    data = _load_dataset(args.features, args.mos)
    if args.ids:
        ids = Path(args.ids).read_text().split()
    elif args.fold is not None:
        ids = _fold(cfg, data, args.fold)[1].test
    else:
        ids = sorted(data)
    metrics = evaluate_model(model, data, ids, cfg.split["pooling"])
    reports = {c: EvalReport(c, [m]) for c, m in metrics.items()}
    _report_outputs(reports, out, "report")
    print(format_table({c: m for c, m in metrics.items()}))
    return EXIT_OK


def cmd_crossval(args, cfg: RunConfig, out: Path) -> int:
    data = _load_dataset(args.features, args.mos)
    plan, _ = _fold(cfg, data, 0)
    model_cfg = cfg.model_config(_input_dim(data))
    _write_json(out / "splits.json", plan.to_dict())

    def on_fold(k, model, history, metrics):
        fold_dir = out / f"fold{k}"
        fold_dir.mkdir(exist_ok=True)
        save_model(model, fold_dir / "model.bin")
        history.to_csv(fold_dir / "history.csv")

    reports = cross_validate(data, plan, model_cfg, cfg.train, cfg.split["pooling"], on_fold)
    _report_outputs(reports, out, "crossval")
    print(format_table({c: rep.aggregate for c, rep in reports.items()}))
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, out: Path) -> int:
    data = _load_dataset(args.features, args.mos)
    plan, fold = _fold(cfg, data, args.fold)
    results = ablation(data, fold, cfg.model_config(_input_dim(data)), cfg.train)
    table = {name: res["metrics"] for name, res in results.items()}
    p_values = {name: res["p_values"] for name, res in results.items() if "p_values" in res}
    with open(out / "ablation.csv", "w") as fh:
        fh.write("model,mae,rmse_star,pcc,srcc,n,p_paired_t,p_wilcoxon\n")
        for name, m in table.items():
            pv = p_values.get(name, {})
            pt, pw = (repr(pv[k]) if k in pv else "" for k in ("paired_t", "wilcoxon"))
            fh.write(f"{name},{m['mae']!r},{m['rmse_star']!r},{m['pcc']!r},{m['srcc']!r},{m['n']},{pt},{pw}\n")
    with open(out / "ablation.jsonl", "w") as fh:
        for name, m in table.items():
            pv = {k: (v if np.isfinite(v) else None) for k, v in p_values.get(name, {}).items()} or None
            fh.write(json.dumps({"model": name, **m, "p_values": pv}, sort_keys=True) + "\n")
    text = format_table(table, p_values)
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {
    "features": cmd_features, "clean": cmd_clean, "simulate": cmd_simulate, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "crossval": cmd_crossval, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    common.add_argument("--out", default="mosqa-out", help="output directory")
    parser = argparse.ArgumentParser(prog="mosqa", description="Non-intrusive MOS prediction toolkit",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[common], help="WAV directory -> log-magnitude feature files")
    p.add_argument("audio_dir")
    p.add_argument("--train-list", help="file listing the clip ids used for normalization statistics")
    p.add_argument("--csv", action="store_true", help="also export each spectrogram as CSV")

    p = sub.add_parser("clean", parents=[common], help="ratings CSV -> per-stimulus MOS CSV")
    p.add_argument("ratings")
    p.add_argument("--profile", choices=["practical", "fidelity"])

    p = sub.add_parser("simulate", parents=[common], help="synthetic ratings (and optionally audio)")
    p.add_argument("--corpus-size", type=int, default=0, help="also synthesize this many labelled clips")

    for name, text in (("train", "train one model"), ("crossval", "k-fold cross-validation"),
                       ("ablate", "train the four encoder/decoder variants")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("features", help="directory of .feat files")
        p.add_argument("mos", help="MOS CSV")
        if name != "crossval":
            p.add_argument("--fold", type=int)
        if name == "train":
            p.add_argument("--variant", choices=list(ABLATION_VARIANTS))

    p = sub.add_parser("predict", parents=[common], help="predict MOS for WAV or feature files")
    p.add_argument("model")
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("evaluate", parents=[common], help="metrics of a trained model")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("mos")
    p.add_argument("--ids", help="file listing the stimulus ids to evaluate")
    p.add_argument("--fold", type=int, help="evaluate the test set of this fold")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = {}
        if args.config:
            try:
                raw = json.loads(Path(args.config).read_text())
            except FileNotFoundError:
                raise MissingInputError(f"config file {args.config} does not exist") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if getattr(args, "profile", None):
            raw["cleaning"] = {**raw.get("cleaning", {}), "profile": args.profile}
        cfg = RunConfig(raw, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.resolved.json", {"command": args.command, **cfg.to_dict()})
        return COMMANDS[args.command](args, cfg, out)
    except CommandError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except (ConfigError, KeyError, TypeError) as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    except (ratings.RatingsFormatError, AudioFormatError, FeatureFileError, CheckpointError) as exc:
        return _fail(EXIT_PARSE, "parse", str(exc))
    except (MissingInputError, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, "missing_input", str(exc))
    except DimensionMismatchError as exc:
        return _fail(EXIT_DIMENSION, "dimension", str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "diverged", str(exc))
    except ValueError as exc:
        return _fail(EXIT_USAGE, "invalid", str(exc))


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
