"""Model configuration and variant presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

VARIANTS = ("teacher", "simple", "mini")
DEFAULT_WIDTHS = (64, 128, 256, 512)
# narrower stages keep a 30-epoch teacher run near two CPU-minutes
DESK_WIDTHS = (16, 32, 64, 128)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "teacher"
    D: int = 64
    N: int = 20
    M: int = 12
    L: int = 6
    K: int = 6
    heads: int = 8
    expansion: int = 4
    C: int = 8
    input_channels: int = 1
    H: int = 32
    W: int = 32
    cnn_widths: tuple[int, ...] = field(default=DEFAULT_WIDTHS)
    token_weighting: bool = True
    dropout: float = 0.5
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "cnn_widths", tuple(int(w) for w in self.cnn_widths))
        if self.variant == "mini":
            object.__setattr__(self, "L", 0)
            object.__setattr__(self, "K", 0)
        elif self.variant == "simple":
            object.__setattr__(self, "L", 1)
            object.__setattr__(self, "K", 1)
            object.__setattr__(self, "expansion", 1)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("D", "N", "M", "C", "heads", "expansion", "input_channels", "H", "W"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.L < 0 or self.K < 0:
            raise ValueError("L and K must be >= 0")
        if (self.L or self.K) and self.D % self.heads:
            raise ValueError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.variant == "teacher" and (self.L == 0) != (self.K == 0):
            raise ValueError("teacher needs L and K both zero or both positive")
        if len(self.cnn_widths) < 2:
            raise ValueError("cnn_widths needs at least two stages")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def has_tokens(self) -> bool:
        """Class tokens exist whenever the encoders are transformers."""
        return self.L > 0

    @property
    def retrieval_width(self) -> int:
        return 256 if self.D >= 256 else min(256, 4 * self.D)

    def with_(self, **changes) -> ModelConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "cnn_widths" in d:
            d["cnn_widths"] = tuple(d["cnn_widths"])
        return cls(**d)


def preset(variant: str, rig: str = "dodeca20", **overrides) -> ModelConfig:
    """Desk-scale defaults: D=64, 32x32 inputs, 8 classes, narrow CNN stages,
    M=8 for circle12 and 12 for dodeca20."""
    from ..data.rigs import DEFAULT_GROUPS, RIG_SIZES

    base = dict(variant=variant, N=RIG_SIZES[rig], M=DEFAULT_GROUPS[rig], cnn_widths=DESK_WIDTHS)
    base.update(overrides)
    return ModelConfig(**base)


def paper_preset(variant: str, rig: str = "dodeca20", **overrides) -> ModelConfig:
    """Full-scale widths and image size; kept for reference, too slow for the CPU tests."""
    base = dict(D=512, H=224, W=224, C=40, input_channels=3, cnn_widths=DEFAULT_WIDTHS)
    base.update(overrides)
    return preset(variant, rig, **base)


def micro_config(variant: str = "teacher", **overrides) -> ModelConfig:
    """Tiny double-precision config for whole-model gradient checks."""
    base = dict(variant=variant, D=8, N=4, M=2, C=3, L=2, K=2, heads=2, expansion=2, H=8, W=8,
                cnn_widths=(2, 4), dropout=0.0, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)
