from __future__ import annotations


class AglpError(Exception):
    pass


class ContractError(AglpError):
    pass


class DimensionError(ContractError):
    """A shape mismatch; the message names both shapes."""


class ConfigurationError(AglpError):
    pass


class ParsingError(ConfigurationError):
    pass


class PrototypeUndefinedError(AglpError):
    def __init__(self, missing: list[int]) -> None:
        self.missing = missing
        super().__init__(f"no examples for classes {missing}, prototypes undefined")


class TrainingAborted(AglpError):
    def __init__(self, step: int, term: str, value: float) -> None:
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite {term} loss ({value}) at step {step}")
