"""Model hyperparameters and the shared parameter set of every learned block."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .numerics import MlpSpec, ParameterSet, init_attention, init_mlp, sinusoidal_encode

SOURCE_MODES = ("roadside", "ego", "fused", "none")

# parameter path prefixes per training stage
STAGE1_PREFIXES = ("rsu.", "ev.", "head.")
STAGE2_PREFIXES = ("mar.",)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    heads: int = 4
    hidden: int = 64
    n_classes: int = 3
    k1: int = 4
    k2: int = 4
    n_tx: int = 256
    pos_dim_per_axis: int = 8
    pos_base: float = 1000.0
    time_dim: int = 8
    time_base: float = 100.0
    gate_radius: float = 2.0
    use_tca: bool = True
    source_mode: str = "roadside"
    use_mar: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.source_mode not in SOURCE_MODES:
            raise ValueError(f"source_mode must be one of {SOURCE_MODES}")
        if self.k1 < 0 or self.k2 < 0 or self.n_tx < 0:
            raise ValueError("k1, k2 and n_tx must be non-negative")
        if self.gate_radius <= 0:
            raise ValueError("gate_radius must be positive")

    @property
    def use_tgf(self) -> bool:
        return self.source_mode != "none" and self.k2 > 0

    @property
    def obs_features(self) -> int:
        # center(3) + position code + log dims(3) + sin/cos yaw(2) + confidence(1)
        return 3 + 3 * self.pos_dim_per_axis + 3 + 2 + 1

    def specs(self) -> dict[str, MlpSpec]:
        d, h = self.d, self.hidden
        pe = 3 * self.pos_dim_per_axis
        return {
            "gen": MlpSpec((self.obs_features, h, d)),
            "unify": MlpSpec((d + pe, h, d)),
            "pair": MlpSpec((2 * d, h, d)),
            "motion": MlpSpec((d + self.time_dim + 12, h, d)),
            "cls": MlpSpec((d, h, self.n_classes)),
            "reg": MlpSpec((d, h, 8)),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def build_params(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Initialise every block with seeded uniform(+-1/sqrt(fan_in)) weights.

    All blocks are created regardless of toggles so checkpoints share one layout.
    """
    rng = np.random.default_rng([seed, 0x9A2A])
    specs = cfg.specs()
    p = ParameterSet()
    init_mlp(p, "rsu.gen", specs["gen"], rng)
    init_attention(p, "rsu.tca", cfg.d, rng)
    init_mlp(p, "ev.gen", specs["gen"], rng)
    init_mlp(p, "ev.unify", specs["unify"], rng)
    init_mlp(p, "ev.pair", specs["pair"], rng)
    init_mlp(p, "ev.motion", specs["motion"], rng)
    init_attention(p, "ev.tgf", cfg.d, rng)
    init_mlp(p, "head.cls", specs["cls"], rng)
    init_mlp(p, "head.reg", specs["reg"], rng)
    init_attention(p, "mar.pred", cfg.d, rng)
    init_forecaster_values(p, cfg)
    return p


def init_forecaster_values(p: ParameterSet, cfg: ModelConfig, prefix: str = "mar.pred") -> None:
    """Start the forecaster as "return the attended embedding": identity value and output
    projections, with the output bias cancelling the time code of a one-frame lag.
    Query/key projections keep their random draw.
    """
    eye = np.eye(cfg.d)
    for name in ("v", "o"):
        p.set(f"{prefix}.{name}.w", eye)
        p.set(f"{prefix}.{name}.b", np.zeros(cfg.d))
    p.set(f"{prefix}.o.b", -sinusoidal_encode(-1.0, cfg.d, cfg.time_base))
