"""Capability-locked patch gating with a friction-aware deployment loop.

The inner loop lets an untrusted patch-producing agent mutate a workspace
only through a phase-locked, digest-anchored, coverage-gated pipeline.  The
outer loop deploys the committed code into a simulated market where turnover
costs and a capital-depletion absorbing state supply the penalty signal, and
a human mandate gates re-entry into the inner loop after degradation.
"""

__version__ = "0.1.0"
