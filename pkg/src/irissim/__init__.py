"""Slot-level simulator of a low duty cycle MAC/routing protocol for pipeline sensor networks."""

__version__ = "0.1.0"

from .engine import FailureEvent, RunTrace, Scenario, run  # noqa: E402

__all__ = ["FailureEvent", "RunTrace", "Scenario", "run", "__version__"]
