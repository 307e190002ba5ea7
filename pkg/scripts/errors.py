"""
Exceptions raised across discoflux.

Everything derives from DiscofluxError so the CLI can map failures to exit
code 1 with a single except clause.
"""

from typing import Any, Optional, Tuple


class DiscofluxError(Exception):
    pass


class DomainError(DiscofluxError, ValueError):
    """Density, profile or model parameter outside its admissible domain."""


class RangeError(DiscofluxError, ValueError):
    """Density beyond the range the closure h can reach."""


class DivergenceError(DiscofluxError, ValueError):
    """Fugacity at or above the radius of convergence of Z."""


class ConfigError(DiscofluxError, ValueError):
    pass


class NoSolutionError(DiscofluxError):
    def __init__(
        self,
        alpha: float,
        x: float,
        attainable: Tuple[float, float],
        cell: Optional[int] = None,
    ):
        self.alpha = alpha
        self.x = x
        self.attainable = attainable
        self.cell = cell
        where = f"x={x:.6g}" if cell is None else f"cell {cell} (x={x:.6g})"
        lo, hi = attainable
        super().__init__(
            f"no steady state at flux level {alpha:.6g} at {where}; "
            f"attainable interval is [{lo:.6g}, {hi:.6g}]"
        )


class RejectedStepError(DiscofluxError):
    def __init__(self, dt: float, admissible_dt: float):
        self.dt = dt
        self.admissible_dt = admissible_dt
        super().__init__(f"dt={dt:.6g} violates CFL; admissible dt <= {admissible_dt:.6g}")


class UnsupportedRegimeError(DiscofluxError):
    pass


class QuiescentError(DiscofluxError):
    """Total jump rate is zero; nothing can happen."""


class EventBudgetError(DiscofluxError):
    def __init__(self, budget: int, state: Any):
        self.budget = budget
        self.state = state
        super().__init__(f"event budget of {budget} exhausted at t={getattr(state, 'sim_time', float('nan')):.6g}")


class OrderingBrokenError(DiscofluxError):
    def __init__(self, site: int, event: int, sim_time: float):
        self.site = site
        self.event = event
        self.sim_time = sim_time
        super().__init__(f"eta > xi at site {site} after event {event} (t={sim_time:.6g})")
