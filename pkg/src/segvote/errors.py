"""Exception hierarchy. Each failure mode callers may want to tell apart gets its own class."""


class SegVoteError(Exception):
    pass


class ConfigurationError(SegVoteError, ValueError):
    """Invalid construction parameters (head count, class count, rates...)."""


class ArgumentError(SegVoteError, ValueError):
    pass


class ShapeError(ArgumentError):
    pass


class DegenerateTargetError(ArgumentError):
    """Every pixel of a target map is IGNORE, or a confusion matrix is empty."""


class ConfigParseError(SegVoteError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class ConfigSchemaError(SegVoteError):
    def __init__(self, key_path, message):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class ConfigCrossFieldError(ConfigSchemaError):
    pass


class DataResolutionError(SegVoteError):
    pass


class ManifestSchemaError(SegVoteError):
    pass


class ManifestVersionError(ManifestSchemaError):
    pass


class MissingPatchError(DataResolutionError):
    def __init__(self, path):
        super().__init__(f"referenced patch file does not exist: {path}")
        self.path = path


class CheckpointError(SegVoteError):
    pass


class ReportError(SegVoteError):
    pass
