"""Spoofing-resilient GNSS/odometry localization.

Sliding-window factor graph fusion of pseudoranges and relative-pose
odometry, a chi-squared residual test that excises GPS once it disagrees
with the graph, periodic-authentication bookkeeping, and a seeded
simulation harness for Monte Carlo validation.
"""

from srfgo.liegroup import Pose

__all__ = ["Pose"]
__version__ = "0.1.0"
