"""Collocated nodal projection solver for incompressible flow on
non-graded quadtree grids."""

__version__ = "0.1.0"
