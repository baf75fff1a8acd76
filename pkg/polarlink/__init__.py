"""polarlink - polarization-entanglement fibre link simulator"""

import importlib.metadata

try:
    __version__ = importlib.metadata.version("polarlink")
except importlib.metadata.PackageNotFoundError:
    # Fallback for development mode
    from .__version__ import __version__

__all__ = ["__version__"]
