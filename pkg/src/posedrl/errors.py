class PoseDRLError(Exception):
    pass


class FormatError(PoseDRLError):
    """A file does not follow the expected on-disk layout."""


class SpecInfeasible(PoseDRLError):
    pass


class DegenerateSegment(PoseDRLError, ValueError):
    pass


class ShapeMismatch(PoseDRLError, ValueError):
    pass


class BufferTooSmall(PoseDRLError):
    pass


class ChannelClosed(PoseDRLError):
    pass


class ConfigError(PoseDRLError, ValueError):
    pass
