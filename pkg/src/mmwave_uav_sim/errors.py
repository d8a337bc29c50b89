"""Exception hierarchy for the simulator.

The CLI maps ``ConfigError`` to exit code 2 and every other
``SimulationError`` to exit code 3.
"""


class SimulationError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimulationError, ValueError):
    """Invalid run configuration or missing input file."""


class SceneError(SimulationError, ValueError):
    """Malformed scene file, unknown material or degenerate geometry."""


class RouteError(SimulationError, ValueError):
    """Malformed or invalid route definition."""


class MaterialError(SimulationError, ValueError):
    """Unknown material model or frequency outside its validity range."""


class GeometryError(SimulationError, ValueError):
    """Invalid geometric input (zero-length segment, bad direction, ...)."""


class ChannelError(SimulationError, ValueError):
    """Channel quantity requested from an empty or degenerate path set."""


class DatasetError(SimulationError):
    """Dataset read/write failure."""


class IntegrityError(DatasetError):
    """Broken reference between dataset tables, or unknown id."""


class EnergyBoundError(SimulationError):
    """An interaction coefficient would create energy."""
