"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition or invariant."""


class ManifestError(ValidationError):
    """Raised when a tensor archive is missing or mismatches a required tensor."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite. Carries the step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
