"""Named parameter tensors backed by a single flat vector."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .config import ModelConfig


def parameter_layout(config: ModelConfig) -> "OrderedDict[str, tuple]":
    layout = OrderedDict()
    in_dim = config.input_dim
    for k, width in enumerate(config.layer_widths):
        if k > 0:
            in_dim = 2 * config.layer_widths[k - 1] * config.effective_reduction
        for direction in ("fwd", "bwd"):
            layout[f"enc{k}.{direction}.W"] = (in_dim, 4 * width)
            layout[f"enc{k}.{direction}.U"] = (width, 4 * width)
            layout[f"enc{k}.{direction}.b"] = (4 * width,)
    pooled = config.latent_dim
    if config.use_attention:
        for name in ("Wq", "Wk", "Wv"):
            layout[f"att.{name}"] = (config.latent_dim, config.attention_dim)
        pooled = config.attention_dim
    layout["fc.W"] = (pooled, config.fc_units)
    layout["fc.b"] = (config.fc_units,)
    layout["out.W"] = (config.fc_units, 1)
    layout["out.b"] = (1,)
    return layout


class ModelParameters:
    """All trainable weights; ``self[name]`` returns a writable view into ``flat``."""

    def __init__(self, config: ModelConfig, flat: np.ndarray | None = None):
        self.config = config
        self.layout = parameter_layout(config)
        self.offsets = {}
        pos = 0
        for name, shape in self.layout.items():
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.size = pos
        if flat is None:
            flat = np.zeros(pos)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (pos,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({pos},)")
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop = self.offsets[name]
        return self.flat[start:stop].reshape(self.layout[name])

    def names(self):
        return list(self.layout)

    def zeros_like(self) -> "ModelParameters":
        return ModelParameters(self.config, np.zeros(self.size))

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, self.flat.copy())


def init_parameters(config: ModelConfig, seed: int | None = None) -> ModelParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget-gate bias +1."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = ModelParameters(config)
    for name, shape in params.layout.items():
        view = params[name]
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            view[...] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("enc") and name.endswith(".b"):
            width = shape[0] // 4
            view[width:2 * width] = 1.0
    return params
