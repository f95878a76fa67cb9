"""Lattice laboratory for planar topological singularities.

XY spins, screw dislocations and Ginzburg-Landau fields on square lattices,
their defect measures, conversion maps between the models, a flat norm on
defect measures and constrained minimizers.
"""

__version__ = "0.1.0"
