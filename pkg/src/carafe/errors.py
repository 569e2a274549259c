class CarafeError(Exception):
    pass


class ShapeError(CarafeError, ValueError):
    """Tensor extents disagree with what an operation expects."""


class ConfigError(CarafeError, ValueError):
    """Hyper-parameters violate an invariant (odd kernels, sigma >= 1, ...)."""


class ContractError(CarafeError, ValueError):
    """An input breaks a value-level precondition, e.g. unnormalized kernels."""


class TrainingDiverged(CarafeError, RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss
