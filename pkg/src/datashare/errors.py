"""Exception hierarchy shared by every layer of the package."""


class DataShareError(Exception):
    """Base class for all errors raised by datashare."""


# ledger
class ChainError(DataShareError):
    pass


class EmptyBlock(ChainError):
    pass


class BadSignature(ChainError):
    pass


class UnknownPublisher(ChainError):
    pass


class OversizePayload(ChainError):
    pass


class UnknownStream(ChainError):
    pass


class ChainFormatError(ChainError):
    pass


# cryptography
class CryptoError(DataShareError):
    pass


class BadChunkSize(CryptoError):
    pass


class NonceReuse(CryptoError):
    pass


class AuthenticationFailure(CryptoError):
    pass


class UnwrapFailure(CryptoError):
    pass


class UnknownRecipientKey(CryptoError):
    pass


# off-chain storage
class StoreError(DataShareError):
    pass


class DuplicateItem(StoreError):
    pass


class CorruptChunk(StoreError):
    pass


class UnknownItem(StoreError):
    pass


# contract engine
class ContractError(DataShareError):
    pass


class Unauthorized(ContractError):
    pass


class InsufficientFunds(ContractError):
    pass


class OddDeposit(ContractError):
    pass


class WrongState(ContractError):
    pass


class SelfDealing(ContractError):
    pass


class DuplicateRegistration(ContractError):
    pass


class UnknownContract(ContractError):
    pass


class GasLimitExceeded(ContractError):
    pass


class FeatureDisabled(ContractError):
    pass


# simulation
class SimulationError(DataShareError):
    pass


class NotSubscribed(SimulationError):
    pass


class ContentGone(SimulationError):
    """Requested content was deleted or is not held by any reachable node."""


class ChunkVerificationFailure(SimulationError):
    pass


class NonQuiescence(SimulationError):
    pass


class ConfigError(DataShareError):
    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
