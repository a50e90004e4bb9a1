"""GPT-2 architecture descriptions."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple


class HeadId(NamedTuple):
    layer: int
    head: int


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int
    n_head: int
    d_model: int
    d_vocab: int = 50257
    context_length: int = 1024
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layer", "n_head", "d_model", "d_vocab", "context_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_head:
            raise ValueError(f"d_model={self.d_model} not divisible by n_head={self.n_head}")
        if self.layer_norm_eps <= 0:
            raise ValueError("layer_norm_eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_head

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_model

    @property
    def total_heads(self) -> int:
        return self.n_layer * self.n_head

    def heads(self) -> list[HeadId]:
        return [HeadId(l, h) for l in range(self.n_layer) for h in range(self.n_head)]

    def check_head(self, head: HeadId) -> None:
        layer, h = head
        if not (0 <= layer < self.n_layer and 0 <= h < self.n_head):
            raise ValueError(f"head {tuple(head)} outside {self.n_layer}x{self.n_head}")

    def param_count(self) -> int:
        """Number of trainable parameters (output projection tied to wte)."""
        d, f = self.d_model, self.d_mlp
        per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
        return self.d_vocab * d + self.context_length * d + self.n_layer * per_layer + 2 * d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


PRESETS = {
    "small": ModelConfig(n_layer=12, n_head=12, d_model=768),
    "medium": ModelConfig(n_layer=24, n_head=16, d_model=1024),
    "large": ModelConfig(n_layer=36, n_head=20, d_model=1280),
    "xl": ModelConfig(n_layer=48, n_head=25, d_model=1600),
}


def preset(name: str) -> ModelConfig:
    key = name.lower().removeprefix("gpt2-").removeprefix("gpt2_")
    if key == "gpt2":
        key = "small"
    try:
        return PRESETS[key]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
