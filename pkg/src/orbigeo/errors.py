"""Exception hierarchy.

Two families: ``ContractError`` for bad inputs or violated preconditions
(CLI exit code 2) and ``NumericalFailure`` for solver breakdowns (exit code 3).
Every exception may carry a ``diagnostics`` dict that is written into reports.
"""

from typing import Any, Dict, Optional


class OrbigeoError(Exception):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ContractError(OrbigeoError):
    exit_code = 2


class NumericalFailure(OrbigeoError):
    exit_code = 3


class SchemaError(ContractError):
    pass


class PreconditionError(ContractError):
    pass


class PoleEvaluation(ContractError):
    pass


class OutOfChart(ContractError):
    pass


class BadSheet(ContractError):
    pass


class NotSymmetric(ContractError):
    pass


class EventUnsupported(ContractError):
    pass


class ConjugateDataMissing(ContractError):
    pass


class ConvergenceFailure(NumericalFailure):
    pass


class StepFailure(NumericalFailure):
    pass


class NoConvergence(NumericalFailure):
    pass


class DegenerateToPoint(NumericalFailure):
    pass


class StepRejected(NumericalFailure):
    pass


class EmbeddingLost(NumericalFailure):
    pass


class BracketNotFound(NumericalFailure):
    pass


class SubdivisionTooCoarse(NumericalFailure):
    pass


class NoShorterLoop(NumericalFailure):
    pass


class StageFailure(NumericalFailure):
    pass


class NoSecondReturn(NumericalFailure):
    pass


class TangentialEncounter(NumericalFailure):
    pass
