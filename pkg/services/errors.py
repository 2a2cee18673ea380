"""Exceptions shared by the codec, decoder and metrics."""


class SpmapError(Exception):
    """Base class for every error raised by spmap."""


class EvaluationError(SpmapError):
    """An evaluation could not be carried out on otherwise valid inputs."""


# --- Mesh input ---

class ParseError(SpmapError, ValueError):
    pass


class EmptyMesh(SpmapError, ValueError):
    pass


class UnnormalizedMesh(SpmapError, ValueError):
    pass


# --- Spherical grid / SP maps ---

class OutOfRange(SpmapError, ValueError):
    pass


class NonPositiveDepth(SpmapError, ValueError):
    pass


class OriginPoint(SpmapError, ValueError):
    pass


class PadTooLarge(SpmapError, ValueError):
    pass


class BadMagic(SpmapError, ValueError):
    pass


class HeaderMismatch(SpmapError, ValueError):
    pass


class GridMismatch(SpmapError, ValueError):
    pass


class EmptyMap(SpmapError, ValueError):
    pass


class TruncatedMap(SpmapError, ValueError):
    """Hits were dropped during encoding, so ray parity is unreliable."""


# --- Reconstruction / metrics ---

class EmptyGrid(SpmapError, ValueError):
    pass


class EmptySet(SpmapError, ValueError):
    pass


class StackMismatch(SpmapError, ValueError):
    pass


class NonWatertight(EvaluationError):
    pass
