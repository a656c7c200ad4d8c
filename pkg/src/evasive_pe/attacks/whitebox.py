"""
Gradient-guided byte replacement. Both attacks move a set of byte positions
through embedding space: the negative score gradient at each position picks a
direction, and the byte whose embedding lies closest to that ray (and ahead
of the current embedding) replaces the current byte.
"""
from time import perf_counter_ns
from typing import Callable, Optional

import numpy as np

from ..classes.errors import AttackError
from ..classes.logger import Logger
from ..malconv import (
    ClassifierModel,
    EmbeddedInput,
    PADDING_TOKEN,
    embed,
    grad_wrt_embeddings,
    integrated_gradients,
    score,
    score_tokens,
    tokenize,
)
from ..pe_format import (
    ByteSample,
    E_LFANEW_OFFSET,
    RegionMask,
    append_overlay,
    dos_region_mask,
    parse_pe,
    structural_validity,
)
from ..util import elapsed_ms
from .schema import AttackConfig, AttackName, AttackOutcome, already_evasive, best_so_far

NO_CHANGE = -1
PROJECTION_CHUNK = 256


def _project(
    candidates: np.ndarray,
    z: np.ndarray,
    gradients: np.ndarray,
    grad_epsilon: float,
) -> np.ndarray:
    """
    Vectorised projection for many positions at once. Returns one byte per
    row of z, or NO_CHANGE.
    """
    result = np.full(len(z), NO_CHANGE, dtype=np.int64)

    for start in range(0, len(z), PROJECTION_CHUNK):
        zc = z[start : start + PROJECTION_CHUNK]
        gc = gradients[start : start + PROJECTION_CHUNK]

        norms = np.linalg.norm(gc, axis=1)
        usable = norms >= grad_epsilon
        direction = -gc / np.where(usable, norms, 1.0)[:, None]

        delta = candidates[None, :, :] - zc[:, None, :]
        along = np.einsum("pbd,pd->pb", delta, direction)
        residual = np.linalg.norm(delta - along[..., None] * direction[:, None, :], axis=2)
        residual = np.where(along > 0, residual, np.inf)

        # argmin keeps the smallest byte value on ties
        best = residual.argmin(axis=1)
        found = usable & np.isfinite(residual[np.arange(len(zc)), best])
        result[start : start + PROJECTION_CHUNK] = np.where(found, best, NO_CHANGE)

    return result


def projection_replace(
    model: ClassifierModel,
    embedded: EmbeddedInput,
    position: int,
    gradient: np.ndarray,
    grad_epsilon: float = 1e-12,
) -> Optional[int]:
    """Replacement byte for one position, or None for no change."""
    if not 0 <= position < model.config.window:
        raise ValueError("position must lie inside the classifier window")

    byte = _project(
        model.embedding[:PADDING_TOKEN],
        embedded.z[position : position + 1],
        np.asarray(gradient, dtype=np.float64).reshape(1, -1),
        grad_epsilon,
    )[0]
    return None if byte == NO_CHANGE else int(byte)


def _search(
    model: ClassifierModel,
    start: bytes,
    start_score: float,
    positions: RegionMask,
    config: AttackConfig,
    raw_scores: list[float],
    logger: Logger,
) -> tuple[bytes, float, int]:
    """
    Batch-updates every position once per iteration from the best candidate
    so far. Returns (best bytes, best score, iterations).
    """
    candidates = model.embedding[:PADDING_TOKEN]
    index = positions.array()

    best, best_score = start, start_score
    rejected: Optional[bytes] = None
    iterations = 0

    while iterations < config.max_iterations and best_score >= config.success_threshold:
        embedded = embed(model, tokenize(best, model.config))
        gradients = grad_wrt_embeddings(model, embedded, positions)
        replacements = _project(
            candidates, embedded.z[index], gradients, config.grad_epsilon
        )

        proposal = bytearray(best)
        for position, byte in zip(index.tolist(), replacements.tolist()):
            if byte != NO_CHANGE:
                proposal[position] = byte
        proposed = bytes(proposal)

        # Deterministic updates: a repeat means the search is stuck.
        if proposed == best or proposed == rejected:
            logger.debug(f"No further progress after {iterations} iterations")
            break

        proposed_score = float(score_tokens(model, tokenize(proposed, model.config)[None, :])[0])
        raw_scores.append(proposed_score)
        iterations += 1

        if proposed_score < best_score:
            best, best_score = proposed, proposed_score
            rejected = None
        else:
            rejected = proposed

        logger.debug(
            f"iteration {iterations}: proposed={proposed_score:.6f} best={best_score:.6f}"
        )

    return best, best_score, iterations


def _finish(
    model: ClassifierModel,
    sample: ByteSample,
    attack_name: AttackName,
    config: AttackConfig,
    best: bytes,
    iterations: int,
    n_phi: Callable[[ByteSample], int],
    initial_score: float,
    raw_scores: list[float],
    start_ns: int,
) -> AttackOutcome:
    """Re-verifies the best candidate from its serialized bytes."""
    output = ByteSample(best, source_path=sample.source_path)
    valid = structural_validity(output)
    final_score = score(model, output)
    raw_scores.append(final_score)

    return AttackOutcome(
        sample_id=sample.name,
        sha256=sample.id,
        attack_name=attack_name,
        seed=config.seed,
        evaded=valid and final_score < config.success_threshold,
        initial_score=initial_score,
        final_score=final_score,
        iterations=iterations,
        n_phi=n_phi(output),
        queries=len(raw_scores),
        wall_ms=elapsed_ms(start_ns),
        score_trajectory=best_so_far(raw_scores),
        output=output,
    )


def padding_attack(
    model: ClassifierModel,
    sample: ByteSample,
    config: AttackConfig,
    logger: Optional[Logger] = None,
) -> AttackOutcome:
    if logger is None:
        logger = Logger(prefix="padding")
    start_ns = perf_counter_ns()

    parse_pe(sample)
    window = model.config.window
    if len(sample) >= window:
        raise AttackError(
            "INFEASIBLE",
            f"{sample.name} is {len(sample)} bytes, no padding fits in the {window}-byte window",
        )

    initial_score = score(model, sample)
    raw_scores = [initial_score]
    if initial_score < config.success_threshold:
        return already_evasive(
            sample, "padding", initial_score, 1, config.seed, elapsed_ms(start_ns)
        )

    budget = min(config.padding_budget, window - len(sample))
    rng = np.random.default_rng(config.seed)
    padding = rng.integers(0, 256, budget, dtype=np.uint8).tobytes()
    padded = append_overlay(sample, padding)

    padded_score = score(model, padded)
    raw_scores.append(padded_score)

    positions = RegionMask(tuple(range(len(sample), len(padded))))
    best, _, iterations = _search(
        model, padded.data, padded_score, positions, config, raw_scores, logger
    )

    return _finish(
        model,
        sample,
        "padding",
        config,
        best,
        iterations,
        lambda _: budget,
        initial_score,
        raw_scores,
        start_ns,
    )


def dos_header_attack(
    model: ClassifierModel,
    sample: ByteSample,
    config: AttackConfig,
    logger: Optional[Logger] = None,
) -> AttackOutcome:
    if logger is None:
        logger = Logger(prefix="dos")
    start_ns = perf_counter_ns()

    view = parse_pe(sample)
    if model.config.window < E_LFANEW_OFFSET:
        raise AttackError(
            "INFEASIBLE",
            f"The {model.config.window}-byte window does not cover the DOS header",
        )

    initial_score = score(model, sample)
    raw_scores = [initial_score]
    if initial_score < config.success_threshold:
        return already_evasive(
            sample, "dos", initial_score, 1, config.seed, elapsed_ms(start_ns)
        )

    positions = dos_region_mask(view)
    if config.ig_top_k is not None:
        attributions = integrated_gradients(model, sample, config.ig_steps)
        positions = attributions.top(config.ig_top_k, within=positions)
        logger.debug(f"Highest-attribution header offsets: {list(positions)}")

    best, _, iterations = _search(
        model, sample.data, initial_score, positions, config, raw_scores, logger
    )

    original = np.frombuffer(sample.data, dtype=np.uint8)

    def changed_header_bytes(output: ByteSample) -> int:
        modified = np.frombuffer(output.data, dtype=np.uint8)
        return int(np.count_nonzero(original != modified))

    return _finish(
        model,
        sample,
        "dos",
        config,
        best,
        iterations,
        changed_header_bytes,
        initial_score,
        raw_scores,
        start_ns,
    )
