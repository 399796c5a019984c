"""Exception hierarchy shared by every phylograd module."""


class PhylogradError(Exception):
    """Base class for all library errors."""


class ValidationError(PhylogradError, ValueError):
    """Input data failed a structural or consistency check."""


class ParameterDomainError(ValidationError):
    """A numeric parameter lies outside its admissible domain."""


class ParseError(ValidationError):
    """Malformed Newick or FASTA text.

    ``offset`` is the zero-based byte offset where parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SequencingError(PhylogradError, RuntimeError):
    """A traversal step ran before the buffers it depends on were filled."""


class ConfigurationError(PhylogradError, ValueError):
    """An execution plan violates a block-size or staging constraint."""


class ImpossiblePatternError(PhylogradError, ArithmeticError):
    """One or more site patterns have zero likelihood under the model."""

    def __init__(self, patterns):
        self.patterns = list(patterns)
        shown = ", ".join(str(p) for p in self.patterns[:10])
        more = "" if len(self.patterns) <= 10 else f" (+{len(self.patterns) - 10} more)"
        super().__init__(f"zero likelihood for site pattern(s) {shown}{more}")
