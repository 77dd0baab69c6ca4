"""Numerical knobs shared across modules.

Every value here can be overridden per call; the CLI also reads them from the
``[numerics]`` section of a config file.
"""

from dataclasses import dataclass

import numpy as np

# sigma_min <= TAU_SING * sigma_max  =>  numerically singular
TAU_SING = 1e-10
# degeneracy broadening used by the SVD backward pass
EPS_BROAD = 1e-8
MACHINE_EPS = float(np.finfo(np.float64).eps)


def pinv_cutoff(shape, sigma_max, rcond=None):
    """Absolute cutoff below which singular values are treated as zero in A+."""
    if rcond is None:
        rcond = max(shape) * MACHINE_EPS
    return rcond * sigma_max


@dataclass(frozen=True)
class Numerics:
    tau_sing: float = TAU_SING
    eps_broad: float = EPS_BROAD
    pinv_rcond: float | None = None

    def to_dict(self):
        return {"tau_sing": self.tau_sing, "eps_broad": self.eps_broad,
                "pinv_rcond": self.pinv_rcond}
