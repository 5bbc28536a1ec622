"""Large-deviation toolkit for scaled path-dependent jump-diffusions."""
from __future__ import annotations

__version__ = "0.1.0"
