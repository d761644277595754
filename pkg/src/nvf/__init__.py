"""Neural vector fields for surface reconstruction from point clouds.

Submodules are imported on demand so that ``nvf.cli`` can pin thread counts
before numpy loads.
"""

__version__ = "0.1.0"
