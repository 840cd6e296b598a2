"""Resource providers: in-memory mock and local sandbox backends."""

from .base import (
    AttrSpec,
    NotFound,
    PortUnavailable,
    Provider,
    ProviderSchema,
    ProvisionFailed,
    RESOURCE_TYPES,
    ResourceTypeSchema,
)
from .local import LocalProvider
from .mock import MockProvider

__all__ = [
    "AttrSpec",
    "LocalProvider",
    "MockProvider",
    "NotFound",
    "PortUnavailable",
    "Provider",
    "ProviderSchema",
    "ProvisionFailed",
    "RESOURCE_TYPES",
    "ResourceTypeSchema",
]
