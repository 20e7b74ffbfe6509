"""Multitype branching processes with immigration in a random environment.

Exact simulation of the branching equation, clan and regeneration tracking,
exact truncated-kernel oracles, and Monte Carlo checks of the process's
limit theorems.
"""

__version__ = "0.1.0"
