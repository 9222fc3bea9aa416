"""
Hata sınıfları.

Every failure the library can report is a HamflowError. The command layer
(hamflow.handlers) turns them into the uniform error payload:

    {
        "success": false,
        "error":   "Step Failure",
        "detail":  "...",
        "status_code": 1
    }
"""


class HamflowError(Exception):
    title = 'Runtime Error'
    exit_code = 1

    def __init__(self, detail=None, **context):
        self.detail = detail if detail is not None else self.title
        self.context = context
        super().__init__(self.detail)

    def payload(self):
        data = {
            'success': False,
            'error': self.title,
            'detail': self.detail,
            'status_code': self.exit_code,
        }
        if self.context:
            data['context'] = {k: _plain(v) for k, v in self.context.items()}
        return data


def _plain(value):
    # numpy scalars/arrays -> JSON-friendly values
    if hasattr(value, 'tolist'):
        return value.tolist()
    return value


# --- Girdi hataları ---

class DimensionMismatch(HamflowError):
    title = 'Dimension Mismatch'


class ShapeMismatch(HamflowError):
    title = 'Shape Mismatch'


class InvalidParameter(HamflowError):
    title = 'Invalid Parameter'


class UnknownSystem(HamflowError):
    title = 'Unknown System'


class UnsupportedScheme(HamflowError):
    title = 'Unsupported Scheme'


class InvalidTime(HamflowError):
    title = 'Invalid Time'


class EmptyBatch(HamflowError):
    title = 'Empty Batch'


class MissingTargets(HamflowError):
    title = 'Missing Targets'


class NonScalarRoot(HamflowError):
    title = 'Non-Scalar Root'


# --- Sayısal hatalar ---

class StepFailure(HamflowError):
    """Newton solve did not converge (or hit a singular matrix)."""

    title = 'Step Failure'

    def __init__(self, detail=None, step_index=None, last_iterate=None, residual_norm=None):
        super().__init__(
            detail,
            step_index=step_index,
            residual_norm=residual_norm,
        )
        self.step_index = step_index
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm

    def at_step(self, step_index):
        return StepFailure(
            f"{self.detail} (step {step_index})",
            step_index=step_index,
            last_iterate=self.last_iterate,
            residual_norm=self.residual_norm,
        )


class ToleranceUnreachable(HamflowError):
    title = 'Tolerance Unreachable'


class InfeasiblePosition(HamflowError):
    title = 'Infeasible Position'


class EmptyIntersection(HamflowError):
    title = 'Empty Intersection'


class UndefinedMetric(HamflowError):
    title = 'Undefined Metric'


class CheckpointFormatError(HamflowError):
    title = 'Checkpoint Format Error'


class TrainingDiverged(HamflowError):
    title = 'Training Diverged'
