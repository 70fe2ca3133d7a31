"""The pyramid-BLSTM encoder with self-attention decoder, batched."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dsp import FeatureStats, Spectrogram, normalize, normalize_utterance
from . import layers
from .config import ModelConfig
from .params import ModelParameters, init_parameters

MOS_RANGE = (0.0, 10.0)


class DimensionMismatchError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite values in {where}")
        self.where = where


@dataclass
class MOSModel:
    config: ModelConfig
    params: ModelParameters
    stats: FeatureStats | None = None

    @classmethod
    def create(cls, config: ModelConfig, stats: FeatureStats | None = None) -> "MOSModel":
        return cls(config, init_parameters(config), stats)

    def prepare(self, features) -> np.ndarray:
        """Apply the stored normalization statistics (if any) to raw log-magnitude features."""
        spec = features if isinstance(features, Spectrogram) else Spectrogram("", np.asarray(features, float))
        if spec.n_bins != self.config.input_dim:
            raise DimensionMismatchError(
                f"features have {spec.n_bins} bins, model expects {self.config.input_dim}")
        if self.config.normalization == "utterance":
            spec = normalize_utterance(spec)
        elif self.stats is not None:
            spec = normalize(spec, self.stats)
        return spec.data


def pack_batch(sequences: Sequence[np.ndarray]):
    lengths = np.array([len(s) for s in sequences])
    if lengths.min() < 1:
        raise ValueError("empty feature sequence")
    out = np.zeros((len(sequences), lengths.max(), sequences[0].shape[1]))
    for b, seq in enumerate(sequences):
        out[b, :len(seq)] = seq
    return out, lengths


def _direction(params, k, direction):
    prefix = f"enc{k}.{direction}"
    return params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"]


def encoder_forward(config: ModelConfig, params: ModelParameters, x, lengths):
    """Return latent states ``(B, T_h, 2*H_L)``, latent lengths and per-layer caches."""
    caches = []
    h = x
    for k in range(len(config.layer_widths)):
        step = None
        if k > 0 and config.effective_reduction > 1:
            step = h.shape[1]
            h, lengths = layers.pyramid_reduce(h, lengths, config.effective_reduction)
        mask = layers.sequence_mask(lengths, h.shape[1])
        h, cache = layers.blstm_forward(h, mask, _direction(params, k, "fwd"), _direction(params, k, "bwd"))
        caches.append((step, cache))
    return h, lengths, caches


def forward_batch(config: ModelConfig, params: ModelParameters, x, lengths):
    """Unclamped predictions for a padded batch plus everything needed for backward."""
    latent, latent_lengths, enc_caches = encoder_forward(config, params, x, lengths)
    mask = layers.sequence_mask(latent_lengths, latent.shape[1])
    att_cache = alpha = None
    if config.use_attention:
        seq, alpha, att_cache = layers.self_attention_forward(
            latent, mask, params["att.Wq"], params["att.Wk"], params["att.Wv"])
    else:
        seq = latent
    pooled = layers.masked_mean(seq, mask)
    y, fc_cache = layers.fc_head_forward(pooled, params["fc.W"], params["fc.b"], params["out.W"], params["out.b"])
    cache = dict(enc=enc_caches, att=att_cache, fc=fc_cache, mask=mask, seq_shape=seq.shape, alpha=alpha)
    return y, cache


def _check(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(name)


def backward_batch(config: ModelConfig, params: ModelParameters, dy, cache) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector, given ``dL/dy``."""
    grads = params.zeros_like()
    dpooled, dW1, db1, dW2, db2 = layers.fc_head_backward(dy, cache["fc"], params["fc.W"], params["out.W"])
    _check("fc head", dpooled, dW1, dW2)
    grads["fc.W"][...] = dW1
    grads["fc.b"][...] = db1
    grads["out.W"][...] = dW2
    grads["out.b"][...] = db2
    mask = cache["mask"]
    dseq = mask[..., None] * dpooled[:, None, :] / mask.sum(axis=1)[:, None, None]
    if config.use_attention:
        dh, dWq, dWk, dWv = layers.self_attention_backward(
            dseq, cache["att"], params["att.Wq"], params["att.Wk"], params["att.Wv"])
        _check("attention", dh, dWq, dWk, dWv)
        grads["att.Wq"][...] = dWq
        grads["att.Wk"][...] = dWk
        grads["att.Wv"][...] = dWv
    else:
        dh = dseq
    for k in range(len(config.layer_widths) - 1, -1, -1):
        step, blstm_cache = cache["enc"][k]
        fwd, bwd = _direction(params, k, "fwd"), _direction(params, k, "bwd")
        dh, g_f, g_b = layers.blstm_backward(dh, blstm_cache, fwd, bwd)
        _check(f"encoder layer {k}", dh, *g_f, *g_b)
        for direction, g in (("fwd", g_f), ("bwd", g_b)):
            for name, value in zip(("W", "U", "b"), g):
                grads[f"enc{k}.{direction}.{name}"][...] = value
        if step is not None:
            dh = layers.pyramid_expand(dh, step, config.effective_reduction)
    return grads.flat


def mse_loss(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError("prediction/target length mismatch")
    if preds.size == 0:
        raise ValueError("empty batch")
    return float(np.mean((preds - targets) ** 2))


def loss_and_grad(config: ModelConfig, params: ModelParameters, sequences, targets):
    """MSE loss on a batch of (already normalized) feature matrices and its flat gradient."""
    x, lengths = pack_batch(sequences)
    targets = np.asarray(targets, dtype=np.float64)
    y, cache = forward_batch(config, params, x, lengths)
    loss = mse_loss(y, targets)
    if not np.isfinite(loss):
        raise NonFiniteError("loss")
    grad = backward_batch(config, params, 2.0 * (y - targets) / len(targets), cache)
    return loss, grad, y


def forward(model: MOSModel, features) -> float:
    """Raw (unclamped) MOS prediction for one utterance of raw log-magnitude features."""
    x = model.prepare(features)
    y, _ = forward_batch(model.config, model.params, x[None], np.array([len(x)]))
    return float(y[0])


def predict_normalized(config, params, sequences, batch_size: int = 32) -> np.ndarray:
    out = np.empty(len(sequences))
    # group by length so padding stays small; order of results follows the input
    order = np.argsort([len(s) for s in sequences], kind="stable")
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x, lengths = pack_batch([sequences[i] for i in idx])
        y, _ = forward_batch(config, params, x, lengths)
        out[idx] = y
    return out


def predict(model: MOSModel, features_list, batch_size: int = 32) -> np.ndarray:
    """MOS predictions clamped to the 0..10 rating scale."""
    seqs = [model.prepare(f) for f in features_list]
    return np.clip(predict_normalized(model.config, model.params, seqs, batch_size), *MOS_RANGE)


def attention_weights(model: MOSModel, features) -> np.ndarray:
    x = model.prepare(features)
    _, cache = forward_batch(model.config, model.params, x[None], np.array([len(x)]))
    if cache["alpha"] is None:
        raise ValueError("model has no attention layer")
    return cache["alpha"][0]
