import numpy as np

from mbpire.laws import FiniteLaw, LawTables

F = FiniteLaw.from_pairs
BERN = F([(0, 0.5), (1, 0.5)])


def one_type(offspring, immigration):
    """Tables for d = 1 given per-state offspring and immigration laws."""
    return LawTables.from_lists([[p] for p in offspring], immigration)


def three_sigma(p, n):
    return 3.0 * np.sqrt(p * (1 - p) / n)
