"""Exception hierarchy shared by all submodules."""


class MFACError(Exception):
    """Base class for every error raised by :mod:`mfac`."""


class ParameterError(MFACError, ValueError):
    """An argument is outside its admissible range."""


class FeatureEvaluationError(MFACError, ArithmeticError):
    """A feature produced a non-finite value.

    Attributes
    ----------
    index : int
        Position of the offending feature inside its family.
    """

    def __init__(self, index, message=None):
        self.index = int(index)
        super().__init__(message or f"feature {index} produced a non-finite value")


class SimulationOverflowError(MFACError, FloatingPointError):
    """A simulated state left the overflow box.

    Attributes
    ----------
    trajectory : int
        Index of the first diverging trajectory.
    step : int
        Time step index at which the bound was exceeded.
    """

    def __init__(self, trajectory, step, bound):
        self.trajectory = int(trajectory)
        self.step = int(step)
        self.bound = float(bound)
        super().__init__(
            f"state exceeded {bound:g} in trajectory {trajectory} at step {step}"
        )


class UnsupportedModelError(MFACError, TypeError):
    """The requested algorithm does not apply to the given model."""


class AssemblyError(MFACError, ValueError):
    """The Galerkin system could not be assembled."""

    def __init__(self, message, basis_index=None):
        self.basis_index = basis_index
        super().__init__(message)


class SingularSystemError(MFACError, ArithmeticError):
    """The (regularized) Galerkin matrix is numerically singular."""

    def __init__(self, condition):
        self.condition = float(condition)
        super().__init__(f"Galerkin matrix is singular (condition estimate {condition:.3e})")


class RiccatiSolvabilityError(MFACError, ArithmeticError):
    """The Riccati system has no admissible solution from the available data."""


class RiccatiConvergenceError(MFACError, ArithmeticError):
    """Newton iteration did not converge."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class PerturbationError(MFACError, ValueError):
    """A policy perturbation does not integrate to zero under the policy."""


class ConfigError(MFACError, ValueError):
    """A configuration file is malformed or inconsistent."""


class TrainingError(MFACError, RuntimeError):
    """Training stopped early.

    The partial log is attached so callers can persist it; the underlying
    cause is available as ``__cause__``.
    """

    def __init__(self, iteration, log, cause):
        self.iteration = int(iteration)
        self.log = log
        super().__init__(f"training aborted at iteration {iteration}: {cause}")
