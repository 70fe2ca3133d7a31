from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields


def _check_keys(cls, data: dict) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the MOS regressor.

    ``use_pyramid`` and ``use_attention`` switch between the four topologies
    (BLSTM, pBLSTM, BLSTM+Attn, pBLSTM+Attn); every width stays the same.
    """

    input_dim: int
    base_blstm_units: int = 256
    pyramid_units: tuple = (128, 64, 32)
    reduction_factor: int = 2
    use_pyramid: bool = True
    use_attention: bool = True
    attention_dim: int = 64
    fc_units: int = 32
    normalization: str = "global"
    seed: int = 0

    def __post_init__(self):
        if self.normalization not in ("global", "utterance"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "pyramid_units", tuple(int(u) for u in self.pyramid_units))
        if self.reduction_factor < 1:
            raise ValueError("reduction_factor must be >= 1")
        if self.use_pyramid and not self.pyramid_units:
            raise ValueError("pyramid_units must be non-empty when use_pyramid is set")
        widths = (self.input_dim, self.base_blstm_units, self.attention_dim, self.fc_units) + self.pyramid_units
        if min(widths) < 1:
            raise ValueError("all widths must be >= 1")

    @property
    def n_pyramid_layers(self) -> int:
        return len(self.pyramid_units)

    @property
    def layer_widths(self) -> tuple:
        return (self.base_blstm_units,) + self.pyramid_units

    @property
    def effective_reduction(self) -> int:
        return self.reduction_factor if self.use_pyramid else 1

    @property
    def latent_dim(self) -> int:
        return 2 * self.layer_widths[-1]

    def latent_length(self, n_frames: int) -> int:
        n = n_frames
        for _ in self.pyramid_units:
            n = -(-n // self.effective_reduction)
        return n

    def with_flags(self, use_pyramid: bool, use_attention: bool) -> "ModelConfig":
        d = asdict(self)
        d.update(use_pyramid=use_pyramid, use_attention=use_attention)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pyramid_units"] = list(self.pyramid_units)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        _check_keys(cls, data)
        return cls(**data)


ABLATION_VARIANTS = {
    "BLSTM": (False, False),
    "pBLSTM": (True, False),
    "BLSTM + Attn": (False, True),
    "pBLSTM + Attn": (True, True),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 5.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        _check_keys(cls, data)
        return cls(**data)
