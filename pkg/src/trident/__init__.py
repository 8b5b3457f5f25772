"""Three-branch (main / time-global / frequency-global) speech enhancement in numpy."""

__version__ = "0.1.0"
