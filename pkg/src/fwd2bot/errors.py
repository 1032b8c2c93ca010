"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class Fwd2BotError(Exception):
    exit_code = 1


class ContractError(Fwd2BotError):
    """A caller violated a precondition."""

    exit_code = 2


class DimensionError(ContractError):
    pass


class CapacityError(ContractError):
    pass


class ConfigError(ContractError):
    pass


class DataError(Fwd2BotError):
    exit_code = 3


class VocabularyError(DataError):
    pass


class SamplerError(DataError):
    pass


class IngestionError(DataError):
    pass


class StoreLookupError(DataError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class CorruptionError(DataError):
    pass


class NumericError(Fwd2BotError, ArithmeticError):
    exit_code = 4


class DegenerateInputError(NumericError):
    pass
