"""Two-scale FE solver for periodic porous media with frictionless self-contact in pores.

The package is organised bottom-up:

- :mod:`microcontact.mesh`         periodic cell meshes, macro meshes, contact pairing
- :mod:`microcontact.fem`          plane-strain elasticity on the cell, reduced periodic space
- :mod:`microcontact.microsolver`  dual (Schur complement) contact solve on the cell
- :mod:`microcontact.homog`        correctors, homogenized tangent, contact sensitivities
- :mod:`microcontact.macrosolver`  ML / MC-Uzawa / MC-Newton global algorithms
- :mod:`microcontact.io`           configuration, mesh files, VTK and CSV output
- :mod:`microcontact.cli`          command-line entry points
"""

__version__ = "0.1.0"
