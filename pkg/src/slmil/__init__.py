"""Subnet-level multiple-instance learning on brain functional networks.

Pipeline: ROI time series -> Pearson FC graph -> one sub-graph per
combination of ``i`` subnets -> GCTrans encoder per instance -> attention
pooling -> logistic diagnosis, with attention weights as the explanation.
"""
__version__ = "0.1.0"

from .errors import (CompatibilityError, ConfigError, DivergenceError, EvaluationError,  # noqa: E402
                     InputIOError, MetricUndefinedError, ParseError, ShapeError, SlmilError,
                     ValidationError)

__all__ = [
    "__version__",
    "CompatibilityError", "ConfigError", "DivergenceError", "EvaluationError", "InputIOError",
    "MetricUndefinedError", "ParseError", "ShapeError", "SlmilError", "ValidationError",
]
