class P2VError(Exception):
    """Base class for all library errors."""


class InvalidInputError(P2VError, ValueError):
    """An argument violates an operation's precondition."""


class DatasetError(P2VError, IOError):
    """A scene manifest, point file, or mesh file is missing or malformed."""


class NumericalError(P2VError, RuntimeError):
    """A computation produced non-finite values.

    `layer` names the network stage that produced them, when known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer: {layer})")
        self.layer = layer
