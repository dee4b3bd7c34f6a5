"""GAN training viewed as integrating an ODE.

Submodules: ``autodiff`` (reverse-mode graphs), ``games`` (toy, linear and
small MLP GAN games), ``integrators`` (Runge-Kutta style steppers),
``eigen``/``analysis`` (spectra and local-convergence checks), ``trainer``
(the training loop) and ``experiments``/``cli`` (reproducible runs).
"""

__version__ = "0.1.0"
