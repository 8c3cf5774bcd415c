"""Architecture descriptors, round-trippable through checkpoint headers."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class TransformerSpec:
    kind: str               # "score" (bidirectional, noise-conditioned) or "ar" (causal)
    vocab_size: int
    layers: int = 4
    heads: int = 4
    dim: int = 128
    context: int = 256
    mlp_mult: int = 4
    time_dim: int = 64      # noise-conditioning width; unused by "ar"
    rope: bool = True       # rotary positions; "ar" uses learned absolute instead
    mask_id: int | None = None

    def __post_init__(self):
        if self.kind not in ("score", "ar"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary positions")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerSpec":
        return cls(**d)


def score_spec(vocab_size: int, mask_id: int | None = None, **kw) -> TransformerSpec:
    return TransformerSpec(kind="score", vocab_size=vocab_size, rope=True,
                           mask_id=mask_id, **kw)


def ar_spec(vocab_size: int, **kw) -> TransformerSpec:
    return TransformerSpec(kind="ar", vocab_size=vocab_size, rope=False, **kw)
