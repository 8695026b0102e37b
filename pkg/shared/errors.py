class SimulatorError(Exception):
    """Base error for the simulator. ``exit_code`` is what the CLI returns when it surfaces."""

    exit_code = 2

    def __init__(self, message: str, exit_code: int | None = None):
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(message)


class ConfigError(SimulatorError, ValueError):
    exit_code = 1


class StageError(SimulatorError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")


class ShapeError(SimulatorError, ValueError):
    pass


class NonFiniteError(SimulatorError, ArithmeticError):
    def __init__(self, message: str, node_id: int | None = None, op: str | None = None):
        self.node_id = node_id
        self.op = op
        super().__init__(message)


class NonDifferentiableError(SimulatorError, RuntimeError):
    pass


class DivergenceError(SimulatorError, ArithmeticError):
    pass


class CheckpointError(SimulatorError, ValueError):
    pass


class PhyError(SimulatorError, ValueError):
    pass


class CodecError(SimulatorError, ValueError):
    pass


class AttackError(SimulatorError, ValueError):
    pass


class MetricError(SimulatorError, ValueError):
    pass


class DatasetError(SimulatorError, ValueError):
    pass


class GraphStateError(SimulatorError, RuntimeError):
    pass


class DefenseError(SimulatorError, ValueError):
    pass
