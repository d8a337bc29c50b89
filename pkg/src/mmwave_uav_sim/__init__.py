"""mmwave-uav-sim: ray-traced 60 GHz multipath datasets for UAV receivers."""

__version__ = "0.1.0"

__all__ = ["__version__"]
