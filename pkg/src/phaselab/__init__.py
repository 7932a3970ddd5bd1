"""phaselab: pseudospectral simulation and numerical auditing of stochastic
reaction-diffusion systems whose diffusion is weighted by a phase-field.

The package integrates the coupled system

    dphi/dt = gamma*Lap(phi) + g(phi, c) + Psi(phi, c, grad phi)
    dc      = (D*Lap(c) + D*grad(c).grad(phi)/phi + f(phi, c)) dt
              + eta(c) b(phi, c) dW

on the flat torus, together with the regularization ladder (gradient cap,
eps shift of the singular quotient, small-power weights) and a diagnostics
layer that re-derives every identity and bound the solution theory rests
on, numerically, from simulated trajectories.
"""

__version__ = "0.1.0"

from . import diagnostics, dynamics, harness, models, noise, torus  # noqa: F401
