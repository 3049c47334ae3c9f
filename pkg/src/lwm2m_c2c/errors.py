"""Exception hierarchy shared by all modules."""


class Lwm2mError(Exception):
    """Base class for protocol and model errors."""


class NotFound(Lwm2mError):
    pass


class TypeMismatch(Lwm2mError):
    pass


class ValueTooLarge(Lwm2mError):
    pass


class Malformed(Lwm2mError):
    """Raised by every decoder on input it cannot parse exactly."""


class MissingEp(Malformed):
    pass


class Forbidden(Lwm2mError):
    pass


class OwnerUnknown(Lwm2mError):
    pass


class Denied(Lwm2mError):
    pass


class ObservationEvicted(Lwm2mError):
    pass


class DuplicateEndpoint(Lwm2mError):
    pass


# secure channel

class ChannelError(Lwm2mError):
    pass


class NoCredentials(ChannelError):
    pass


class CookieRejected(ChannelError):
    pass


class PeerExpired(ChannelError):
    pass


class HandshakeFailed(ChannelError):
    pass


class ReplayDetected(ChannelError):
    pass


class AuthFailed(ChannelError):
    pass


class ChannelClosed(ChannelError):
    pass


# authorization

class NoTrustedServer(Lwm2mError):
    pass


class PolicyRefused(Lwm2mError):
    pass


# transport / simulation

class GiveUp(Lwm2mError):
    """A confirmable message exhausted its retransmissions."""


class ConfigInvalid(Lwm2mError):
    pass


class UnknownNode(Lwm2mError):
    pass
