"""From waveforms to a trained MOS regressor, on a small synthetic corpus.

Steps:
  * synthesize clips whose noise level tracks a hidden quality score, and
    label them through a simulated listening study plus cleaning;
  * extract log-magnitude spectrograms and training-set statistics;
  * show how the pyramid shortens the sequence the attention layer sees;
  * train the four encoder variants on one split and compare them.

The default widths are scaled down so the script finishes in a few minutes
on one core; ``--full`` uses the full-size model (much slower).  With so few
clips, small batches and a larger step size are used than the library
defaults, so the little model gets enough updates.

    python demos/02_features_to_mos_model.py [--clips 80] [--epochs 60] [--full]
"""
import argparse

import numpy as np

from mosqa import metrics, pipeline
from mosqa.dsp import FrameConfig, compute_feature_stats, extract_features
from mosqa.model import ModelConfig, TrainConfig, attention_weights
from mosqa.simulate import StudyConfig, SynthAudioConfig, build_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clips", type=int, default=80)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--full", action="store_true", help="full-size model widths")
    args = ap.parse_args()

    frame = FrameConfig.strict_fft512()
    items = build_corpus(args.clips, SynthAudioConfig(seed=args.seed), StudyConfig(seed=args.seed))
    print(f"{len(items)} clips of {items[0].clip.samples.size / items[0].clip.sample_rate_hz:.1f} s; "
          f"labels span {min(i.label.mos for i in items):.2f}..{max(i.label.mos for i in items):.2f}")
    q = np.array([i.quality for i in items])
    labels = np.array([i.label.mos for i in items])
    print(f"cleaned crowd MOS vs hidden quality: PCC {metrics.pcc(labels, q):.3f}\n")

    data = {it.label.stimulus_id: pipeline.LabeledUtterance(extract_features(it.clip, frame), it.label)
            for it in items}
    first = next(iter(data.values())).features
    print(f"features: {first.n_frames} frames x {first.n_bins} bins "
          f"({frame.frame_len_ms} ms frames, {frame.hop_ms} ms hop)")

    fold = pipeline.dataset_splits(data, seed=args.seed).folds[0]
    stats = compute_feature_stats(data[i].features for i in fold.train)
    print(f"training-set statistics from {stats.frame_count} frames; "
          f"per-bin mean ranges {stats.mean.min():.1f}..{stats.mean.max():.1f}\n")

    if args.full:
        cfg = ModelConfig(input_dim=frame.n_bins, seed=args.seed)
    else:
        cfg = ModelConfig(input_dim=frame.n_bins, base_blstm_units=24, pyramid_units=(16, 12, 8),
                          attention_dim=8, fc_units=8, seed=args.seed)
    for pyramid in (False, True):
        c = cfg.with_flags(pyramid, True)
        print(f"{'with' if pyramid else 'without'} pyramid: {first.n_frames} frames -> "
              f"{c.latent_length(first.n_frames)} attention positions")

    print(f"\nsplit: {len(fold.train)} train / {len(fold.validation)} validation / {len(fold.test)} test; "
          f"{args.epochs} epochs per variant")
    results = pipeline.ablation(data, fold, cfg, TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed))
    rows = {name: r["metrics"] for name, r in results.items()}
    p_values = {name: r["p_values"] for name, r in results.items() if "p_values" in r}
    print(metrics.format_table(rows, p_values))

    full = results["pBLSTM + Attn"]["model"]
    alpha = attention_weights(full, data[fold.test[0]].features)
    print(f"\nattention over {alpha.shape[0]} latent positions for {fold.test[0]}: "
          f"the heaviest query row puts {alpha.max(axis=1).max():.2f} of its weight on one key")


if __name__ == "__main__":
    main()
