from typing import Any, TypeVar

from pydantic import BaseModel as PydanticBaseModel


class EvasivePeError(Exception):
    pass


BaseModelSelf = TypeVar("BaseModelSelf", bound="BaseModel")


class BaseModel(PydanticBaseModel):
    class Config:
        arbitrary_types_allowed = True
        validate_assignment = True
        allow_population_by_field_name = True

    def evolve(self: BaseModelSelf, **changes: Any) -> BaseModelSelf:
        """
        Copy with some fields replaced, validated like a fresh instance.
        Pydantic's copy(update=...) skips validation entirely.
        """
        return self.__class__(**{**dict(self), **changes})
