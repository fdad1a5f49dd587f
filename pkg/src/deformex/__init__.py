"""Mean Euler characteristics of excursion sets of deformed Gaussian fields.

Simulation of ``X o theta`` for an isotropic Gaussian field ``X`` and a
smooth deformation ``theta``, Euler characteristic estimators for excursion
sets, identification of ``theta`` (up to rotation) from tables of mean
modified Euler characteristics, and single-realization estimators for
spiral deformations.
"""
__version__ = "0.1.0"
