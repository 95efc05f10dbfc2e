"""Desk-scale bench for studying training reproducibility of a CNN
surrogate that advances 2D acoustic wave fields.

Subsystems: D2Q9 lattice-Boltzmann data generation (`lbm`), database
construction (`dataset`), precision-generic tensor ops with controllable
summation order (`nn_core`), the 3-scale prediction network (`msnet`),
ensemble training (`training`), auto-regressive inference (`rollout`),
reproducibility statistics (`analysis`) and the command line (`cli`).
"""

__version__ = "0.1.0"

PRECISIONS = ("single", "double")
