"""Exception hierarchy shared by every module in the package."""


class GatewayError(Exception):
    """Base class for all errors raised by this package."""


# --- engine registry and store errors ---------------------------------------

class DuplicateKey(GatewayError):
    """A store or provider key is already registered."""


class InvalidCapacity(GatewayError):
    """Store capacity must be a positive integer."""


class UnknownStore(GatewayError):
    """No store registered under the given key."""


class UnknownProvider(GatewayError):
    """No provider registered under the given key."""


class NotFound(GatewayError):
    """The requested data id is absent or was evicted."""


class NoProvider(GatewayError):
    """No provider publishes to the requested store."""


class ChooserRequired(NoProvider):
    """Several providers publish to the store but no chooser policy is set."""


class AllCandidatesUnavailable(GatewayError):
    """Every chooser candidate is busy or failed and the policy is exhausted."""


class OutputMismatch(GatewayError):
    """A chooser candidate does not publish to the policy's store."""


# --- execution runtime errors ------------------------------------------------

class RuntimeStopped(GatewayError):
    """Submission rejected because the runtime is not running."""


class AlreadyRunning(GatewayError):
    """The runtime was asked to start twice."""


class NotRunning(GatewayError):
    """The runtime was asked to stop while not running."""


class QueueFull(GatewayError):
    """A pending queue reached its configured depth."""


# --- source errors -------------------------------------------------------

class ProfileInvalid(GatewayError):
    """Stream profile fields are out of range."""


class AlreadyStopped(GatewayError):
    """The stream handle was stopped twice."""


class MalformedFrame(GatewayError):
    """Payload is not a valid sensor frame."""


class BadDimensions(GatewayError):
    """Image dimensions are outside the supported range."""


class UnknownPattern(GatewayError):
    """No such test-pattern id."""


class MalformedImage(GatewayError):
    """Payload is not a parseable binary PPM image."""


# --- backend adapter errors ----------------------------------------------

class BackendUnreachable(GatewayError):
    """Could not connect to the backend endpoint."""


class Timeout(GatewayError):
    """The backend did not answer within the connect timeout."""


class BackendError(GatewayError):
    """The backend answered with an error status."""

    def __init__(self, status: int, message: str = ""):
        self.status = status
        super().__init__(message or f"backend returned status {status}")


class NoWorkerAssigned(GatewayError):
    """The master has no worker to hand out."""


class PollExhausted(GatewayError):
    """The result did not become ready within the poll limit."""

    def __init__(self, polls: int, message: str = ""):
        self.polls = polls
        super().__init__(message or f"result not ready after {polls} polls")


class TransferFailed(GatewayError):
    """A file-store put or get failed."""


class TaskFailed(GatewayError):
    """The submitted task ended in the Failed state."""


class UnknownTransform(GatewayError):
    """No such local transform id."""


# --- harness errors -------------------------------------------------------

class ParseError(GatewayError):
    """Config file is missing, unreadable, or structurally invalid."""


class UnknownReference(GatewayError):
    """Config references a key that is not declared."""


class CycleDetected(GatewayError):
    """The trigger graph contains a cycle and allow_cycle is not set."""


class PortInUse(GatewayError):
    """Requested mock-server port is already bound."""


class DaemonUnreachable(GatewayError):
    """No daemon is listening on the control socket."""


class ScenarioFailed(GatewayError):
    """A scripted scenario step failed."""
