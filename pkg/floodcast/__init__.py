"""
Desk-scale streamflow forecasting: basin curation, skill metrics,
extreme-value flood thresholds and a two-stage LSTM forecaster
"""

from ._version import __version__
from .errors import FloodcastError, NonFiniteError, StageError, TrainingDivergedError, ValidationError
