"""Sequential optimal experimental design when the regression model is uncertain.

Candidate models are bandit arms; each stage runs a mix of the drawn
model's optimal design and a uniform design, then scores every candidate
on the new data.
"""

__version__ = "0.1.0"

from .design import CriterionSpec, Design, D_OPT, efficiency, info_matrix  # noqa: E402
from .models import ModelSpec, ObservationSet, builtin_suite, model_from_id  # noqa: E402
from .solver import optimal_design, robust_geometric_mean_design, solve_locally_optimal  # noqa: E402

__all__ = [
    "CriterionSpec", "D_OPT", "Design", "ModelSpec", "ObservationSet", "builtin_suite", "efficiency",
    "info_matrix", "model_from_id", "optimal_design", "robust_geometric_mean_design", "solve_locally_optimal",
]
