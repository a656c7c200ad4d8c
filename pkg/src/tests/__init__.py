from dataclasses import dataclass

from evasive_pe.malconv import ModelConfig


@dataclass
class Config:
    # small enough for finite differences
    gradient_model: ModelConfig
    # a single window, so max-pooling never switches along an IG path
    smooth_model: ModelConfig
    # big enough to hold the fixture PEs plus padding
    attack_model: ModelConfig
    # covers generated corpus files with room to pad
    harness_model: ModelConfig
    seeds: int = 20


base_config = Config(
    gradient_model=ModelConfig(window=64, embed_dim=4, filters=4, kernel_width=8, hidden=8),
    smooth_model=ModelConfig(window=32, embed_dim=4, filters=4, kernel_width=32, hidden=8),
    attack_model=ModelConfig(window=2048, embed_dim=8, filters=16, kernel_width=32, hidden=16),
    harness_model=ModelConfig(window=4096, embed_dim=4, filters=8, kernel_width=32, hidden=8),
)
