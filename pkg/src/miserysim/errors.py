"""Exception taxonomy shared across the package."""

from __future__ import annotations


class MiserySimError(Exception):
    """Base class for all package errors."""


class ConfigError(MiserySimError):
    """Invalid experiment or component configuration."""


# --- topology ---

class TopologyError(MiserySimError):
    """Base class for digraph construction/transform errors."""


class InvalidSpec(TopologyError):
    """Digraph shape parameters out of range (d < 2 or k < 1)."""


class NoTaggedInstances(TopologyError):
    """The tag filter matched no instances in the snapshot."""


class NoTarget(TopologyError):
    """No instance in the described network is marked as the target."""


class NoEntryPoint(TopologyError):
    """No instance in the described network is marked as an entry point."""


class DisconnectedPath(TopologyError):
    """The target is not reachable from every entry point."""


class IncompatibleSpecs(TopologyError):
    """Union inputs disagree on d or k."""


class LayerConflict(TopologyError):
    """A shared node appears at conflicting layers/positions in a union."""


class UnknownNode(TopologyError):
    """A node id does not occur in the digraph."""


# --- simulated cloud provider ---

class CloudError(MiserySimError):
    """Base class for simulated-provider errors."""


class UnknownInstance(CloudError):
    """An operation referenced an instance id the provider does not know."""


class InvalidState(CloudError):
    """An instance is not in a state that permits the operation."""


class CapacityExceeded(CloudError):
    """The provider's configured instance cap was reached."""


# --- transport ---

class ConnectionRefused(MiserySimError):
    """No firewall rule permits the attempted connection, or the peer is down."""


class SessionSevered(MiserySimError):
    """An open exchange or channel was cut by a rule revocation or termination."""


class ProtocolViolation(MiserySimError):
    """A peer sent bytes that do not conform to the wire protocol."""


# --- multicaster ---

class TimeoutFailure(MiserySimError):
    """All children exceeded the response timeout u."""


class NoChildren(MiserySimError):
    """A forwarding node's address table is empty (address desynchronization)."""


# --- isolated target ---

class StorageFailure(MiserySimError):
    """The durable registry could not persist an entry."""


class UnknownId(MiserySimError):
    """Response delivery for a correlation id that was never enqueued."""


class ConflictingResponse(MiserySimError):
    """A second, different response was delivered for an answered request."""


# --- movement ---

class NoEligibleLayer(MiserySimError):
    """No layer in 2..d holds two or more nodes to switch."""


class ConcurrentMutation(MiserySimError):
    """A transformation cycle started while another was in flight."""


# --- address server ---

class UnknownOwner(MiserySimError):
    """Lookup or update for an owner that never registered."""


class AlreadyRegistered(MiserySimError):
    """Registration for an owner that already has a record."""
