"""Exception hierarchy shared by the library and the CLI."""


class EgcbfError(RuntimeError):
    """Base class for every error raised by the package."""


class ShapeError(EgcbfError, ValueError):
    """An autodiff op received operands of incompatible shapes."""


class TapeError(EgcbfError):
    """A gradient was requested for a tensor the tape never recorded."""


class IntegrationError(EgcbfError):
    """The integrator produced a non-finite state."""

    def __init__(self, message, agent_id=None, seed=None):
        super().__init__(message)
        self.agent_id = agent_id
        self.seed = seed

    def with_seed(self, seed):
        return IntegrationError(f"{self} (episode seed {seed})", self.agent_id, seed)


class InfeasibleConfigurationError(EgcbfError):
    """Rejection sampling could not place agents, targets or obstacles."""


class UnknownAgentError(EgcbfError, KeyError):
    pass


class MissingControlError(EgcbfError, KeyError):
    pass


class CheckpointError(EgcbfError):
    """Missing, corrupt or version-incompatible checkpoint file."""


class TrainingDivergedError(EgcbfError):
    """The loss became non-finite; the last good checkpoint is attached."""

    def __init__(self, message, checkpoint_path=None, iteration=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.iteration = iteration


class BaselineUnsupportedError(EgcbfError):
    """Hand-crafted CBF baselines only exist for the double integrator."""
