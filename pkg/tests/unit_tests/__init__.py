"""Per-module tests for the simulator."""
