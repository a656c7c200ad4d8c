from .schema import AttackConfig, AttackName, AttackOutcome, GammaConfig
from .whitebox import dos_header_attack, padding_attack, projection_replace
from .gamma import ScoreOracle, apply_chromosome, fitness, gamma_attack
