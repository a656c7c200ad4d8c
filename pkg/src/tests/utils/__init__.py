from dataclasses import replace
from typing import Callable

import numpy as np

from evasive_pe.attacks.schema import AttackOutcome
from evasive_pe.malconv import ClassifierModel, _forward, score
from evasive_pe.pe_format import ByteSample, parse_pe


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def calibrated(model: ClassifierModel, sample: ByteSample, target: float) -> ClassifierModel:
    """Shifts the output bias so sample scores target."""
    shift = logit(target) - logit(score(model, sample))
    return replace(model, out_bias=model.out_bias + shift)


def with_output_bias(model: ClassifierModel, bias: float) -> ClassifierModel:
    return replace(model, out_bias=np.array([bias]))


def activation_pattern(model: ClassifierModel, z: np.ndarray) -> tuple:
    """Which window wins each filter and which hidden units are active."""
    cache = _forward(model, z[None, ...])
    return (tuple(cache.argmax[0].tolist()), tuple((cache.h_pre[0] > 0).tolist()))


def central_difference(
    f: Callable[[np.ndarray], float],
    z: np.ndarray,
    index: tuple[int, int],
    eps: float,
) -> float:
    plus = z.copy()
    minus = z.copy()
    plus[index] += eps
    minus[index] -= eps
    return (f(plus) - f(minus)) / (2 * eps)


def changed_offsets(original: ByteSample, modified: ByteSample) -> set[int]:
    """Every offset that differs, counting all bytes past the shorter file."""
    a, b = original.data, modified.data
    common = min(len(a), len(b))
    changed = {i for i in range(common) if a[i] != b[i]}
    changed.update(range(common, max(len(a), len(b))))
    return changed


DOS_OFFSETS = set(range(2, 0x3C))


def assert_contained(original: ByteSample, outcome: AttackOutcome):
    """The output differs from the input only where the attack may write."""
    if outcome.output is None:
        return
    output = outcome.output
    changed = changed_offsets(original, output)

    if outcome.attack_name == "padding":
        assert output.data[: len(original)] == original.data
        assert changed <= set(range(len(original), len(output)))
        return

    if outcome.attack_name == "dos":
        assert len(output) == len(original)
        assert changed <= DOS_OFFSETS
        assert outcome.n_phi == len(changed) <= 58
        return

    before = parse_pe(original).section_table
    after = parse_pe(output).section_table
    assert len(after) >= len(before)
    for old, new in zip(before, after):
        assert output.data[new.raw_offset : new.raw_end] == original.data[old.raw_offset : old.raw_end]
    if len(after) == len(before):
        assert changed <= set(range(len(original), len(output)))
