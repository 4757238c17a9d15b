"""
Error hierarchy

Every error carries a machine-readable ``code`` and the pipeline stage that
raised it, so the CLI can print ``stage: message`` and choose an exit code.
"""

from typing import Iterable, Optional


class RDRecError(Exception):
    """Base class for all pipeline errors (exit code 1)"""

    stage = "rdrec"
    code = "ERROR"
    exit_code = 1

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self) -> str:
        return f"{self.stage}: {self.args[0]}"


class ConfigError(RDRecError):
    """Invalid configuration; reported with the dotted path of the key"""

    stage = "config"
    code = "CONFIG"
    exit_code = 2


class CorpusError(RDRecError):
    stage = "corpus"
    code = "CORPUS"


class ReviewFormatError(CorpusError):
    """Malformed line in a reviews file"""

    code = "MALFORMED_LINE"

    def __init__(self, path: str, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class NoTrainableUsersError(CorpusError):
    code = "NO_TRAINABLE_USERS"


class DistillError(RDRecError):
    """Codes: EMPTY_REVIEW, UNPARSEABLE, BACKEND_FAILED"""

    stage = "distiller"
    code = "DISTILL"


class CodecError(RDRecError):
    stage = "textcodec"
    code = "CODEC"


class ModelError(RDRecError):
    stage = "model"
    code = "MODEL"


class NonFiniteError(ModelError):
    code = "NON_FINITE"

    def __init__(self, layer: str):
        super().__init__(f"non-finite values after {layer}")
        self.layer = layer


class CheckpointError(ModelError):
    """Codes: BAD_MAGIC, VERSION_MISMATCH, CHECKSUM, CONFIG_MISMATCH"""

    stage = "checkpoint"
    code = "CHECKPOINT"


class TrainingError(RDRecError):
    stage = "trainer"
    code = "TRAINING"


class TrainingDivergedError(TrainingError):
    code = "DIVERGED"

    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class InferenceError(RDRecError):
    stage = "inference"
    code = "INFERENCE"


class EvaluationError(RDRecError):
    stage = "evaluator"
    code = "EVALUATION"


class MissingRankingError(EvaluationError):
    code = "MISSING_RANKING"

    def __init__(self, users: Iterable[str]):
        self.users = sorted(users)
        preview = ", ".join(self.users[:20])
        more = "" if len(self.users) <= 20 else f" (+{len(self.users) - 20} more)"
        super().__init__(f"no ranked list for users: {preview}{more}")
