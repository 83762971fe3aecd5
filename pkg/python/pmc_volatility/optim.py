"""The Adam optimizer over `Param` scalars."""
import math
from dataclasses import dataclass
from typing import Iterable

from pmc_volatility.autodiff import Param
from pmc_volatility.errors import ConfigError, NonFiniteError


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(
                f"The learning rate must be positive, got {self.learning_rate}"
            )
        for name in ("beta1", "beta2"):
            beta = getattr(self, name)
            if not 0 <= beta < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {beta}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


def adam_step(params: Iterable[Param], config: AdamConfig = AdamConfig()):
    """Apply one bias-corrected Adam update, then zero the gradients."""
    b1, b2 = config.beta1, config.beta2
    for param in params:
        g = param.grad
        param.step += 1
        param.m = b1 * param.m + (1.0 - b1) * g
        param.v = b2 * param.v + (1.0 - b2) * (g * g)
        m_hat = param.m / (1.0 - b1**param.step)
        v_hat = param.v / (1.0 - b2**param.step)
        param.value -= config.learning_rate * m_hat / (math.sqrt(v_hat) + config.epsilon)
        param.grad = 0.0
        if not (math.isfinite(param.value) and math.isfinite(param.m)):
            raise NonFiniteError(f"Adam produced a nonfinite value for {param.name}")


def zero_grad(params: Iterable[Param]):
    for param in params:
        param.grad = 0.0
