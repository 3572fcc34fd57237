"""Exception hierarchy shared by every shv component."""


class ShvError(Exception):
    def __str__(self):
        # KeyError subclasses would otherwise print the repr of their argument
        return str(self.args[0]) if len(self.args) == 1 else super().__str__()


# model
class MalformedTopic(ShvError, ValueError):
    pass


class LevelExhausted(ShvError):
    pass


class UnknownOrdinal(ShvError, KeyError):
    pass


class NoncontiguousLevels(ShvError, ValueError):
    pass


class DimensionMismatch(ShvError, ValueError):
    pass


class UnknownUnit(ShvError, KeyError):
    pass


# wire
class WireError(ShvError):
    pass


class NeedMoreBytes(WireError):
    """Buffer holds only part of a frame; nothing was consumed."""


class ProtocolViolation(WireError):
    """The peer broke the session rules and must be disconnected."""


class TopicTooLong(WireError, ValueError):
    pass


class PayloadTooLarge(WireError, ValueError):
    pass


class BadLength(WireError, ValueError):
    pass


# config
class ConfigError(ShvError, ValueError):
    pass


# pusher / plugins
class PluginStopped(ShvError):
    pass


class UnknownPlugin(ShvError, KeyError):
    pass


class ReloadFailed(ShvError):
    pass


class UnknownSensor(ShvError, KeyError):
    pass


class EmptyWindow(ShvError):
    pass


class EmptyCache(ShvError):
    pass


class BrokerUnreachable(ShvError, ConnectionError):
    pass


class Unreadable(ShvError, OSError):
    pass


class NotNumeric(ShvError, ValueError):
    pass


# collect agent
class BindFailure(ShvError, OSError):
    pass


# storage
class IoFailure(ShvError, OSError):
    pass


# virtual sensors
class ExprSyntaxError(ShvError, SyntaxError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownOperand(ShvError, KeyError):
    pass


class CycleDetected(ShvError):
    def __init__(self, cycle):
        super().__init__("cycle detected: " + " -> ".join(cycle))
        self.cycle = list(cycle)


class OutOfRange(ShvError):
    pass


# querylib
class InsufficientData(ShvError, ValueError):
    pass


class BadHeader(ShvError, ValueError):
    pass


class BadRow(ShvError, ValueError):
    def __init__(self, row, reason=""):
        super().__init__(f"bad row {row}" + (f": {reason}" if reason else ""))
        self.row = row


# bench
class DegenerateInput(ShvError, ValueError):
    pass


class HarnessFailure(ShvError):
    pass
