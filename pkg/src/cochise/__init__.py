"""cochise: planner/executor reference harness with replayable trajectory logs."""

__version__ = "0.1.0"
