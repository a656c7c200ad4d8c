from typing import Generic, Optional, TypeVar

from typing_extensions import Literal

from ..types import EvasivePeError

PeFormatErrorKind = Literal[
    "NOT_PE",
    "MALFORMED",
    "NO_HEADER_SLACK",
    "INSUFFICIENT_DONORS",
]

ModelErrorKind = Literal[
    "BAD_MAGIC",
    "SHAPE_MISMATCH",
    "EMPTY_CORPUS",
    "DEGENERATE_LABELS",
]

AttackErrorKind = Literal[
    "INFEASIBLE",
    "BUDGET_EXHAUSTED",
]

HarnessErrorKind = Literal[
    "EMPTY_DIRECTORY",
    "NO_SAMPLES",
    "MALFORMED_CSV",
    "SAMPLE_FAILED",
]

K = TypeVar("K", bound=str)


class KindError(EvasivePeError, Generic[K]):
    kind: K
    message: Optional[str]

    def __init__(self, kind: K, message: Optional[str] = None):
        super().__init__(kind, message)
        self.kind = kind
        self.message = message

    def __str__(self):
        if self.message is not None:
            return self.message

        return self.kind


class PeFormatError(KindError[PeFormatErrorKind]):
    pass


class ModelError(KindError[ModelErrorKind]):
    pass


class AttackError(KindError[AttackErrorKind]):
    pass


class HarnessError(KindError[HarnessErrorKind]):
    pass
