"""Ellipsoidal homothetic tube MPC for linear-fractional uncertain systems.

Subpackages/modules:

* ``etmpc.conic``: conic-program IR and the reference SDP solver;
* ``etmpc.model``: uncertain-system description and validation;
* ``etmpc.offline``: tube/terminal design (feedback, shape, tightening);
* ``etmpc.online``: per-step tube program and controller;
* ``etmpc.sim``: closed-loop simulation against sampled realizations;
* ``etmpc.bench``: benchmark families and scaling studies.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401

__all__ = ["errors", "__version__"]
