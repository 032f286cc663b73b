"""Exception taxonomy shared by all modules.

Kept flat so the CLI can map each class to one exit code.
"""


class LayerRouteError(Exception):
    """Base class for all package errors."""


class DimensionError(LayerRouteError):
    """Array extents do not match an operation's requirements."""


class ContractError(LayerRouteError):
    """A caller violated an operation's precondition (non-shape)."""


class NumericError(LayerRouteError):
    """A computation produced or was handed a non-finite value."""


class ConfigError(LayerRouteError):
    """Invalid configuration, scene spec, or checkpoint/config mismatch."""


class DataError(LayerRouteError):
    """Missing or malformed data files."""
