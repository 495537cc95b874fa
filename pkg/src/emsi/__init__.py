"""Coupled electromagneto-thermomechanical finite-element simulation.

Electromagnetic potentials are solved on a mesh of the body plus surrounding
air in the laboratory frame; displacement and temperature are solved on the
body submesh in the reference frame.  A staggered time stepper ties the two
together and a barycentric morph drags the air mesh along with the body.
"""

__version__ = "0.1.0"

# Vacuum constants with the rounding used throughout the package.
EPS0 = 8.85e-12
MU0 = 12.6e-7
C_LIGHT = (1.0 / (MU0 * EPS0)) ** 0.5
