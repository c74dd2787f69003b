"""LQG control with a strategically reported sensor effort.

Library layout:

- :mod:`sensorlqg.model` system spec, noise model, effort-to-variance map
- :mod:`sensorlqg.lqg` finite-horizon LQR and Kalman recursions
- :mod:`sensorlqg.costlab` exact cost moments and their decomposition
- :mod:`sensorlqg.montecarlo` trajectory sampling as a statistical oracle
- :mod:`sensorlqg.incentives` payment schemes and truthfulness audits
- :mod:`sensorlqg.cli` reproducible experiment commands
"""

from .model import (
    ConfigError,
    EffortDomainError,
    EffortLevel,
    EffortMapping,
    SystemSpec,
    effort_mapping,
    load_config,
    measurement_covariance,
    sigma2,
    sigma2_derivs,
)
from .lqg import KalmanSolution, LqrSolution, solve_kalman, solve_lqr
from .costlab import (
    ClosedLoopModel,
    ConsistencyError,
    CostCache,
    CostMoments,
    CostPoint,
    StackedForm,
    build_closed_loop,
    build_stacked_form,
    compile_cost_point,
    cost_moments,
    decompose_cost,
    expected_cost,
    j_star,
    var_cost_partial_ehat,
    variance_of_cost,
)

__version__ = "0.1.0"
