"""cyten: a self-contained DWI/ADC mixture-of-experts classification pipeline.

Subpackages map to the pipeline stages: a numpy-backed autodiff engine
(tensor, ops), persistence (volume_io), preprocessing, the two expert
networks plus the ensemble (models), training (trainer), evaluation
(metrics), logistic correlation (correlation), the synthetic cohort
generator (phantom), and the command-line front end (cli).
"""

__version__ = "0.1.0"

from .errors import CytenError, FormatError, TrainingDiverged, ValidationError
from .tensor import AdamState, Parameter, Tensor, adam_step, grad_check

__all__ = [
    "AdamState", "CytenError", "FormatError", "Parameter", "Tensor",
    "TrainingDiverged", "ValidationError", "adam_step", "grad_check",
    "__version__",
]
