"""Exception types shared across the package."""


class STWError(Exception):
    """Base class for all library errors."""


class EmptyDocument(STWError):
    """All token counts were zero or dropped."""


class UnknownToken(STWError):
    """A token does not belong to the vocabulary."""


class DimensionMismatch(STWError):
    """Operand shapes do not agree with the tree or vocabulary."""


class InvalidTree(STWError):
    """An adjacency matrix violates the rooted-tree conditions."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class TreeTooLarge(STWError):
    """A requested tree exceeds the configured node cap."""


class DuplicatePoints(STWError):
    """The point cloud contains duplicate embeddings and merging is disabled."""


class EmptySet(STWError):
    """An operation over a sampled tree set received no trees."""


class EmptyBatch(STWError):
    """A pair batch has neither positive nor negative pairs."""


class DegenerateLabels(STWError):
    """A split contains a single class where at least two are required."""


class SizeLimit(STWError):
    """Instance exceeds the desk-scale size cap."""


class InfeasibleInput(STWError):
    """Marginals are not simplex vectors."""


class ParseError(STWError):
    """A file failed to parse."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyCorpus(STWError):
    """Corpus file contained no records."""


class MissingWord(STWError):
    """Embedding file does not cover a vocabulary word."""


class EmptySplit(STWError):
    """A required corpus split is empty."""


class VocabularyMismatch(STWError):
    """Stored vocabulary hash does not match the supplied vocabulary."""


class UsageError(STWError):
    """Invalid command-line usage."""
