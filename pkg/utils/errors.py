"""
Exception hierarchy for the DeltaMask simulator.

Library modules raise these; only the command-line layer catches them and
turns them into exit codes.
"""


class DeltaMaskError(Exception):
    """Base class for every error raised by the simulator"""


# Filters

class ConstructionFailed(DeltaMaskError):
    """Peeling did not succeed within the reseeding budget"""


class DuplicateKeys(DeltaMaskError, ValueError):
    """The key set handed to a filter builder contains repeats"""


# Wire formats

class WireFormatError(DeltaMaskError, ValueError):
    """Base class for malformed serialized artefacts"""


class MalformedHeader(WireFormatError):
    pass


class VersionMismatch(WireFormatError):
    pass


class TruncatedPayload(WireFormatError):
    pass


class DecompressFailure(WireFormatError):
    pass


# Masks and models

class LengthMismatch(DeltaMaskError, ValueError):
    pass


class IndexOutOfRange(DeltaMaskError, IndexError):
    pass


class InvalidSpec(DeltaMaskError, ValueError):
    """A model or dataset specification cannot be realised"""


class ShapeMismatch(DeltaMaskError, ValueError):
    pass


class EmptyDataset(DeltaMaskError, ValueError):
    pass


# Aggregation / simulation

class EmptyClientSet(DeltaMaskError, ValueError):
    pass


class TooFewSamples(DeltaMaskError, ValueError):
    pass


class ConfigError(DeltaMaskError, ValueError):
    """Invalid configuration file, override or command-line usage"""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
