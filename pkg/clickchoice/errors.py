class ClickChoiceError(Exception):
    pass


class InputError(ClickChoiceError, ValueError):
    """Malformed input files, unknown categories, grid mismatches."""


class NumericalError(ClickChoiceError, RuntimeError):
    """Solver divergence, or every EM chain failed or degenerated."""
