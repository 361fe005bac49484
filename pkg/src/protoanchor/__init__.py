"""Few-shot motor fault diagnosis toolkit.

Simulated three-phase current signals (virtual twin surrogate),
multi-periodicity feature learning, episodic prototypical meta-training,
and bi-directional prototype-anchoring test-time adaptation, wrapped in a
FastAPI service with a thin CLI client.
"""

__version__ = "0.1.0"
