"""Exception types shared across modules (import-light for the CLI)."""


class DatasetError(RuntimeError):
    """Malformed, missing, or inconsistent dataset input."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries a dump of the offending ray batch."""

    def __init__(self, message: str, ray_dump: dict | None = None):
        super().__init__(message)
        self.ray_dump = ray_dump or {}
