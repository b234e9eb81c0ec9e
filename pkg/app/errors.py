"""
Exception hierarchy for the detector.

Every error carries the process exit code the CLI returns for it:
- ValidationError family -> 2 (bad input, bad flags, untrained models)
- ArtifactIOError        -> 3 (files that cannot be read or written)
- SchemaError family     -> 4 (records that do not match the wire schema)
"""


class FbsDetectorError(Exception):
    """Base class for all detector errors."""
    exit_code = 1


class ValidationError(FbsDetectorError):
    exit_code = 2


class ArtifactIOError(FbsDetectorError):
    exit_code = 3


class SchemaError(FbsDetectorError):
    exit_code = 4


# core-model
class MsaLabelInFbsDataset(ValidationError):
    pass


class UnknownMessageKind(ValidationError):
    pass


class InvalidLabel(ValidationError):
    pass


# simulator
class InvalidScenario(ValidationError):
    pass


class UnregisteredAttack(ValidationError):
    pass


class NotAnAttackTrace(ValidationError):
    pass


# featurize
class SchemaMismatch(SchemaError):
    pass


class ClassTooSmall(ValidationError):
    pass


# numkernel
class ShapeMismatch(ValidationError):
    pass


class AllMasked(ValidationError):
    pass


# models
class EmptyTrainingSet(ValidationError):
    pass


class UntrainedModel(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class MixedLayerInput(ValidationError):
    pass


class MissingClass(ValidationError):
    pass


class UnknownAttack(ValidationError):
    pass


# fusion / metrics
class LabelSpaceMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


# wire format
class FormatVersionMismatch(SchemaError):
    pass


class RecordDecodeError(SchemaError):
    pass
