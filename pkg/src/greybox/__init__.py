"""Grey-box shape signatures for PI-controlled sensor traces.

Traces are summarised by the seven parameters of a damped, linearly driven
oscillator, fitted lot by lot with a shared Gaussian prior, and monitored
through an anomaly score whose gradient points at the parameters responsible.
"""

from .oscillator import PARAM_NAMES, ShapeSignature, TraceSeries

__all__ = ["PARAM_NAMES", "ShapeSignature", "TraceSeries"]
__version__ = "0.1.0"
