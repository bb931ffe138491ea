"""Exception types shared across the package.

Two branches matter for the CLI: ``InputError`` maps to exit code 2 (bad
input), everything else under ``IidLabError`` maps to exit code 1. Each
class carries a stable ``code`` string for machine-parsable stderr lines.
"""


class IidLabError(Exception):
    code = "Error"


class InputError(IidLabError):
    """User-correctable problem: bad file, bad config, bad request."""

    code = "InputError"


class InternalError(IidLabError):
    """Artifact-side failure (I/O, diverged training, missing state)."""

    code = "InternalError"


class MissingFile(InputError):
    code = "MissingFile"


class UnsupportedBitDepth(InputError):
    code = "UnsupportedBitDepth"


class DecodeFailure(InputError):
    code = "DecodeFailure"


class IoFailure(InternalError):
    code = "IoFailure"


class HeaderMismatch(InputError):
    code = "HeaderMismatch"


class TruncatedPayload(InputError):
    code = "TruncatedPayload"


class LabelOverflow(InputError):
    code = "LabelOverflow"


class MalformedSidecar(InputError):
    code = "MalformedSidecar"


class ShapeMismatch(InputError):
    code = "ShapeMismatch"


class SizeMismatch(InputError):
    code = "SizeMismatch"


class DegenerateImage(InputError):
    code = "DegenerateImage"


class DegenerateBatch(InternalError):
    code = "DegenerateBatch"


class MissingGrad(InternalError):
    code = "MissingGrad"


class InvalidConfig(InputError):
    code = "InvalidConfig"


class ManifestEmpty(InputError):
    code = "ManifestEmpty"


class NonFiniteLoss(InternalError):
    code = "NonFiniteLoss"


class WindowLargerThanImage(InputError):
    code = "WindowLargerThanImage"


class EmptyJudgments(InputError):
    code = "EmptyJudgments"


class ZeroTotalWeight(InputError):
    code = "ZeroTotalWeight"


class CheckpointMismatch(InputError):
    code = "CheckpointMismatch"
