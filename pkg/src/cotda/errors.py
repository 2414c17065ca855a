"""Shared exception types.

ContractError marks a violated precondition (bad shapes, invalid
hyperparameters, malformed files). DivergenceError marks a training run
that produced a non-finite loss. LabelAccessError fires when code tries
to read held-back labels while adaptation is in progress.
"""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DivergenceError(RuntimeError):
    """Training produced NaN/inf; carries the last usable checkpoint path."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class LabelAccessError(RuntimeError):
    """Held-back evaluation labels were requested during adaptation."""
