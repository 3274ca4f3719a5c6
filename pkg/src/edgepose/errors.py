"""Exception types raised across the toolkit.

Every error the HTTP layer maps to a structured JSON body lives here so the
server can translate by class name without importing half the package.
"""


class EdgePoseError(Exception):
    """Base class for all toolkit errors."""

    #: short machine-readable code used in wire-level error bodies
    code = "internal_error"


# --- geometry ---------------------------------------------------------------

class PointBehindCamera(EdgePoseError):
    code = "point_behind_camera"


# --- pnp --------------------------------------------------------------------

class TooFewPoints(EdgePoseError):
    code = "too_few_points"


class DegenerateConfiguration(EdgePoseError):
    code = "degenerate_configuration"


class NoValidCandidate(EdgePoseError):
    code = "no_valid_candidate"


class DivergedBehindCamera(EdgePoseError):
    code = "diverged_behind_camera"


# --- metrics ----------------------------------------------------------------

class EmptyModel(EdgePoseError):
    code = "empty_model"


class EmptyDataset(EdgePoseError):
    code = "empty_dataset"


# --- dataset ----------------------------------------------------------------

class SchemaVersionMismatch(EdgePoseError):
    code = "schema_version_mismatch"


class MalformedRecord(EdgePoseError):
    code = "malformed_record"

    def __init__(self, message, index=None, field=None):
        super().__init__(message)
        self.index = index
        self.field = field


class KeypointsOutOfFrame(EdgePoseError):
    code = "keypoints_out_of_frame"


class PnPFailure(EdgePoseError):
    code = "pnp_failure"


class UnsatisfiablePose(EdgePoseError):
    code = "unsatisfiable_pose"


# --- detector ---------------------------------------------------------------

class UnknownFrame(EdgePoseError):
    code = "unknown_frame"


class BackendUnavailable(EdgePoseError):
    code = "backend_unavailable"


class ObjectNotFound(EdgePoseError):
    code = "object_not_found"


# --- edge server ------------------------------------------------------------

class PortInUse(EdgePoseError):
    code = "port_in_use"


class DuplicateProxyName(EdgePoseError):
    code = "duplicate_proxy_name"


class UnknownProxy(EdgePoseError):
    code = "unknown_proxy"


class UndecodableImage(EdgePoseError):
    code = "undecodable_image"


class Busy(EdgePoseError):
    code = "busy"


# --- client bench -----------------------------------------------------------

class ServerUnreachable(EdgePoseError):
    code = "server_unreachable"


# --- calibration ------------------------------------------------------------

class NonMonotonicTimestamp(EdgePoseError):
    code = "non_monotonic_timestamp"


class MissingEdge(EdgePoseError):
    code = "missing_edge"


class StaleEdge(EdgePoseError):
    code = "stale_edge"

    def __init__(self, message, edge=None, age_ms=None):
        super().__init__(message)
        self.edge = edge
        self.age_ms = age_ms


class NoCycle(EdgePoseError):
    code = "no_cycle"


# --- cli / config -----------------------------------------------------------

class ConfigError(EdgePoseError):
    code = "config_error"
