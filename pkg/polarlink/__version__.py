"""Version information for polarlink"""

__version__ = "0.1.0"
