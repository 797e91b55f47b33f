"""Simulation toolkit for the small-friction magnetic Langevin system.

Modules: ``fields`` (problem definitions and closed-form coefficients),
``sde`` (time integrators), ``reeb`` (level-set graph), ``averaging``
(contour integrals and edge coefficients), ``graphdiff`` (the limiting
Markov chain on the graph), ``stats`` (distribution comparison) and
``cli`` (experiment orchestration).
"""

__version__ = "0.1.0"
