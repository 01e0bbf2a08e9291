"""Storage-cost toolkit: information-theoretic and dependency-based memory
load measures for incremental sentence processing, plus the reading-time
evaluation harness."""

__version__ = "0.1.0"
