"""Physics-constrained similarity registration of multi-object scenes."""

from __future__ import annotations

__version__ = "0.1.0"
