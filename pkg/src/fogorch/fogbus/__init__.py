"""Framework components and their message protocol."""

from .calc import CalcInput, CalcOutput, CalculationError, execute_calculation
from .envelope import Envelope, EnvelopeError

__all__ = ["CalcInput", "CalcOutput", "CalculationError", "Envelope", "EnvelopeError", "execute_calculation"]
