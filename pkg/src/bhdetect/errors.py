"""Exception types shared across the pipeline."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class DegenerateBatchError(ContractError):
    """Batch statistics requested over a single element per channel."""


class CorruptIndexError(ContractError):
    """Pooling indices point outside the plane or window they came from."""


class InputShapeError(ContractError):
    pass


class ConfigError(ValueError):
    pass


class DegenerateDatasetError(ValueError):
    pass


class OversizeTargetError(ValueError):
    pass


class EmptyTargetError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class SpecError(ValueError):
    """An encounter description violates the generator's invariants."""


class SequencingError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class ParseError(ValueError):
    """A file on disk could not be decoded.

    The message always names the file and the byte offset where decoding failed.
    """

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset
        self.reason = reason
