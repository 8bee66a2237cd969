"""Exception hierarchy shared across the package."""


class HncRfsError(Exception):
    """Base class for all errors raised by hncrfs."""


class InvalidArgumentError(HncRfsError, ValueError):
    pass


class DegenerateTestError(HncRfsError):
    """A hypothesis test has no information (e.g. zero variance)."""


class DegenerateMetricError(HncRfsError):
    """A metric is undefined for the input (e.g. no comparable pairs)."""


class CoxOverflowError(HncRfsError, FloatingPointError):
    pass


class NoEventsError(HncRfsError):
    """The partial likelihood is empty because no events were observed."""


class DegenerateDesignError(HncRfsError):
    """The design matrix has a constant column."""


class SchemaError(HncRfsError, ValueError):
    pass


class ShapeMismatchError(HncRfsError, ValueError):
    pass


class DegenerateInputError(HncRfsError, ValueError):
    pass


class EmptyRegionError(HncRfsError):
    pass


class DegenerateTextureError(HncRfsError):
    pass


class NoTumorError(EmptyRegionError):
    """No GTVp voxels are available for radiomics extraction."""


class FormatError(HncRfsError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class LabelValidationError(HncRfsError, ValueError):
    pass


class IngestionError(HncRfsError, ValueError):
    pass


class ParseError(IngestionError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StageError(HncRfsError):
    """Wraps a failure with the pipeline stage and patient that caused it."""

    def __init__(self, stage, message, patient_id=None):
        where = stage if patient_id is None else f"{stage} [patient {patient_id}]"
        super().__init__(f"{where}: {message}")
        self.stage = stage
        self.patient_id = patient_id
