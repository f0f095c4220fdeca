""" Exceptions raised by synpatch.

Every exception derives from SynpatchError and from the closest built-in, so
callers can catch either.
"""

class SynpatchError(Exception):
    """ Base class for all synpatch errors.
    """

class ShapeError(SynpatchError, ValueError):
    """ Tensor shapes don't agree.
    """

class NonFiniteError(SynpatchError, ArithmeticError):
    """ A primitive produced NaN or Inf.
    """

class TapeError(SynpatchError, RuntimeError):
    """ A suffix tape was incomplete, reused, or closed on a non-scalar.
    """

class ArchiveError(SynpatchError, ValueError):
    """ The weight archive could not be read.
    """

class MissingTensorError(ArchiveError, KeyError):
    """ The weight archive lacks a tensor the model needs.
    """

    def __init__(self, name):
        self.name = name
        super().__init__(f"missing tensor '{name}'")

    def __str__(self):
        return f"missing tensor '{self.name}'"

class ConfigError(SynpatchError, ValueError):
    """ A model or experiment configuration is invalid.
    """

class TokenizerError(SynpatchError, ValueError):
    """ Bad vocabulary/merges files or token ids.
    """

class SequenceError(SynpatchError, ValueError):
    """ Token sequence is empty, too long, or out of vocabulary range.
    """

class HookPointError(SynpatchError, ValueError):
    """ A hook point string can't be parsed or doesn't exist in the model.
    """

class AlignmentError(SynpatchError, ValueError):
    """ A position spec can't be resolved to a single aligned index.
    """

class InterventionError(SynpatchError, ValueError):
    """ An intervention is malformed (duplicate site, non-unit direction).
    """

class VocabularyError(SynpatchError, ValueError):
    """ Vocabulary too small or ID/OOD vocabularies overlap.
    """

class DatasetError(SynpatchError, ValueError):
    """ Malformed template, pair, or dataset file.
    """

class MetricError(SynpatchError, ValueError):
    """ Degenerate inputs to a metric (zero probability, empty or ragged results).
    """

class RegionError(MetricError):
    """ A benchmark region span is outside the tokenized sentence.
    """

class DivergenceError(SynpatchError, RuntimeError):
    """ DAS training produced a NaN loss.

    The loss trace up to (and including) the failing step is kept on the
    exception so callers can inspect it.
    """

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)
