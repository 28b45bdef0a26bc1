"""treeline: branching generative-media authoring engine.

Persists every authoring step as a node in a provenance tree, plans next
steps through a four-agent pipeline over a pluggable text-model provider,
executes steps through a workflow registry, and converges branches into a
final video through a provenance-linked stitching timeline.
"""

__version__ = "0.1.0"

from .engine import Engine, EngineConfig  # noqa: F401
