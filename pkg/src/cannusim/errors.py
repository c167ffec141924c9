"""Exception types shared across the simulator."""


class CannuSimError(Exception):
    """Base class for all simulator errors."""


# --- world ---------------------------------------------------------------

class CommandOutOfBounds(CannuSimError):
    """Motion command exceeds the configured speed or step caps."""


class WorkspaceExceeded(CannuSimError):
    """Needle pose left the configured workspace box (controller bug)."""


class AlreadyInjected(CannuSimError):
    """Air injection attempted twice on the same trial state."""


# --- imaging -------------------------------------------------------------

class ScanlineMissesROI(CannuSimError):
    """Needle tip is too far from the depth-scan line to appear in frame."""


class OutOfBounds(CannuSimError):
    """Pixel coordinates outside the frame."""


# --- perception ----------------------------------------------------------

class PerceptionError(CannuSimError):
    """Base for recoverable perception failures (controller should hold)."""


class NoNeedleDetected(PerceptionError):
    """No needle-class component found in the planar view."""


class NeedleNotInScan(PerceptionError):
    """No needle cross-section found in the depth scan."""


class EmptySampleSet(CannuSimError):
    """Classifier evaluation called with no samples."""


# --- controller ----------------------------------------------------------

class InvalidTarget(CannuSimError):
    """Target point outside frame bounds."""


class WrongPhase(CannuSimError):
    """Operation not legal in the current controller phase."""


class WrongPercept(CannuSimError):
    """Percept bundle does not match what the current phase consumes."""


# --- harness -------------------------------------------------------------

class ScenarioInvalid(CannuSimError):
    """Scenario file failed validation."""


class TickBudgetExceeded(CannuSimError):
    """Session loop ran past its liveness bound (controller bug)."""


class LogCorrupt(CannuSimError):
    """Event log is truncated or structurally invalid."""


# --- service -------------------------------------------------------------

class UnknownSession(CannuSimError):
    """No session with the given token."""


class SessionLimitReached(CannuSimError):
    """Server already runs the maximum number of sessions."""


class BindFailure(CannuSimError):
    """Server could not bind the requested address."""
