"""Analytic arterial input function (Feng tri-exponential form)."""
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class FengParams(BaseModel):
    """Input function parameters; times in minutes, amplitudes in kBq/mL."""
    model_config = ConfigDict(frozen=True)

    A1: float = Field(851.1225, gt=0)
    A2: float = Field(21.8798, ge=0)
    A3: float = Field(20.8113, ge=0)
    lambda1: float = -4.1339
    lambda2: float = -0.1191
    lambda3: float = -0.0104
    tau: float = Field(0.7, ge=0)

    @model_validator(mode="after")
    def _ordered_rates(self):
        if not (self.lambda1 < self.lambda2 < self.lambda3 < 0):
            raise ValueError(
                "rates must satisfy lambda1 < lambda2 < lambda3 < 0, got "
                f"{self.lambda1}, {self.lambda2}, {self.lambda3}")
        return self

    def as_tuple(self):
        return (self.A1, self.A2, self.A3, self.lambda1, self.lambda2, self.lambda3, self.tau)


def feng_curve(t, a1, a2, a3, l1, l2, l3, tau):
    """Evaluate the input function from raw parameters (no validation)."""
    t = np.asarray(t, dtype=np.float64)
    s = t - tau
    after = s > 0
    s = np.where(after, s, 0.0)
    value = ((a1 * s - a2 - a3) * np.exp(l1 * s)
             + a2 * np.exp(l2 * s)
             + a3 * np.exp(l3 * s))
    return np.where(after, value, 0.0)


def feng_input(params, t):
    """Plasma activity Cp(t); zero up to and including t = tau.

    Args:
        params: FengParams
        t: scalar or array of times in minutes

    Returns:
        float for scalar input, numpy array otherwise
    """
    value = feng_curve(t, *params.as_tuple())
    return float(value) if np.ndim(t) == 0 else value
