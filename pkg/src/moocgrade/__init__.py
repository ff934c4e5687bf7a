"""Grade prediction from MOOC click-streams with personalized linear multi-regression."""

__version__ = "0.1.0"

from .exceptions import DataError, DivergenceError, MoocGradeError  # noqa: E402
from .plmr import PLMRClassifier, PLMRRegressor, PlmrModel  # noqa: E402

__all__ = ["DataError", "DivergenceError", "MoocGradeError", "PLMRClassifier",
           "PLMRRegressor", "PlmrModel", "__version__"]
