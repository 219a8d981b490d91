class AvatarError(Exception):
    """Base class for all package errors."""


class ShapeError(AvatarError, ValueError):
    pass


class ConfigError(AvatarError, ValueError):
    pass


class HeadNotVisibleError(AvatarError):
    """The head joint does not project into the camera; skip the face term."""


class DecodeError(AvatarError, ValueError):
    pass


class DeformationError(AvatarError, ValueError):
    pass


class ManifestError(AvatarError):
    def __init__(self, message: str, paths=()):
        super().__init__(message if not paths else f"{message}: {', '.join(map(str, paths))}")
        self.paths = list(paths)
