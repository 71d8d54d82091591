"""Gateway pipeline engine linking simulated IoT sources to fog/cloud backends."""

from . import errors
from .core import (
    ChooserMode,
    ChooserPolicy,
    DataEnvelope,
    Engine,
    InputSpec,
    Notify,
    ProviderDescriptor,
    ProviderState,
    RequestContext,
    StartProvider,
    choose,
)
from .runtime import ExecutionTicket, Runtime, RuntimeConfig, TicketStatus

__version__ = "0.1.0"

__all__ = [
    "ChooserMode",
    "ChooserPolicy",
    "DataEnvelope",
    "Engine",
    "ExecutionTicket",
    "InputSpec",
    "Notify",
    "ProviderDescriptor",
    "ProviderState",
    "RequestContext",
    "Runtime",
    "RuntimeConfig",
    "StartProvider",
    "TicketStatus",
    "choose",
    "errors",
]
