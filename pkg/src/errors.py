"""
Exception hierarchy for the budgeted-perception lab.
Every error raised on purpose by the lab derives from LabError so the CLI can
turn it into a machine-readable error record.
"""


class LabError(ValueError):
    """Base class for all expected lab failures."""


class ConfigError(LabError):
    """A run config file is unreadable or violates an invariant."""


class IoFailure(LabError):
    """An artifact could not be read or written."""


# --- budget_engine ---

class EmptyRegion(LabError):
    """A crop box has zero area after clamping to the image bounds."""


# --- toolcall_protocol ---

class ProtocolError(LabError):
    """An assistant turn violates the turn grammar."""


class MissingThink(ProtocolError):
    pass


class BothOrNeitherTerminal(ProtocolError):
    """A turn must carry exactly one of a tool call or an answer."""


class MalformedTags(ProtocolError):
    pass


class MalformedToolCall(ProtocolError):
    """The tool-call payload is not a decodable JSON object."""


class UnknownTool(ProtocolError):
    pass


class BBoxCountOutOfRange(ProtocolError):
    pass


class BadCoordinateArity(ProtocolError):
    pass


class EmptyToolResponse(LabError):
    """A tool response needs at least one view."""


# --- rollout_env ---

class EpisodeFinished(LabError):
    """step() was called on an episode that is no longer running."""


# --- synthetic_scenes ---

class SpecInfeasible(LabError):
    pass


# --- policy_core / trainer ---

class ShapeMismatch(LabError):
    pass


class UnknownAction(LabError):
    """A trajectory step has no arm in the policy's arm set."""


class AllGroupsDegenerate(LabError):
    """Every rollout group in a batch had identical rewards."""


class OffPolicyRollout(LabError):
    """A rollout was sampled from a params version other than the current one."""


# --- trajectory_pipeline / eval_harness ---

class ParseError(LabError):
    """A conversation record is structurally unreadable."""


class MismatchedScenes(LabError):
    pass
