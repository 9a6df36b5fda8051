"""Exception hierarchy shared by every flowpipe module."""


class FlowpipeError(Exception):
    """Base class for all errors raised by this package."""


# --- graph construction ---------------------------------------------------

class DuplicateName(FlowpipeError):
    pass


class UnknownNode(FlowpipeError):
    pass


class SelfLoop(FlowpipeError):
    pass


class CycleRejected(FlowpipeError):
    pass


class UnknownEdge(FlowpipeError):
    pass


# --- worker registry / chains ---------------------------------------------

class RegistryFrozen(FlowpipeError):
    pass


class UnknownFunction(FlowpipeError):
    pass


class EmptyChain(FlowpipeError):
    pass


# --- codecs ----------------------------------------------------------------

class CodecError(FlowpipeError):
    pass


# --- executor ---------------------------------------------------------------

class ZeroLanes(FlowpipeError):
    pass


class AlreadyStarted(FlowpipeError):
    pass


class NoTasks(FlowpipeError):
    pass


class ExecutorStopped(FlowpipeError):
    pass


class RemoteUnreachable(FlowpipeError):
    pass


# --- framed wire protocol ---------------------------------------------------

class ProtocolError(FlowpipeError):
    pass


class Oversize(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class MalformedBody(ProtocolError):
    pass


class PortInUse(FlowpipeError):
    pass


class Unreachable(FlowpipeError):
    pass


class VersionMismatch(FlowpipeError):
    pass


# --- direct payload transports ----------------------------------------------

class UnsupportedMethod(FlowpipeError):
    pass


class StagingFailed(FlowpipeError):
    pass


class AlreadyRedeemed(FlowpipeError):
    pass


class Expired(FlowpipeError):
    pass


class TransportError(FlowpipeError):
    pass


# --- pipeline runtime ---------------------------------------------------------

class IllegalState(FlowpipeError):
    pass


class UnknownPiper(FlowpipeError):
    pass


class InputArityMismatch(FlowpipeError):
    pass


class MalformedManifest(FlowpipeError):
    pass


class UnknownExecutor(FlowpipeError):
    pass


# --- CLI -----------------------------------------------------------------------

class MalformedWorkersArg(FlowpipeError):
    pass
