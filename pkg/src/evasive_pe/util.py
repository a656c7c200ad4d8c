import hashlib
from time import perf_counter_ns

SEED_MASK = (1 << 63) - 1


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def derive_seed(seed: int, sample_id: str) -> int:
    """
    Per-sample seed: the global seed xor the leading 64 bits of the sample's
    hex digest, so results don't depend on scheduling order.
    """
    return (seed ^ int(sample_id[:16], 16)) & SEED_MASK


def round_up(value: int, alignment: int) -> int:
    if alignment <= 1:
        return value
    return -(-value // alignment) * alignment


def elapsed_ms(start_ns: int) -> float:
    return (perf_counter_ns() - start_ns) / 1e6
