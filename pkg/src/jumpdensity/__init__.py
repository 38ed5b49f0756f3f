"""Simulation and verification toolkit for jump diffusions with degenerate noise.

Modules:

* :mod:`~jumpdensity.dsl` – expression language for vector fields, exact derivatives
* :mod:`~jumpdensity.fields` – models, Lie brackets, the bracket hierarchy and its checks
* :mod:`~jumpdensity.levy` – jump measures, sampling, quadrature, integrability conditions
* :mod:`~jumpdensity.engine` – Euler scheme for the state and both Jacobian flows
* :mod:`~jumpdensity.malliavin` – reduced covariance matrix and Monte Carlo diagnostics
* :mod:`~jumpdensity.inequalities` – martingale and Norris-type inequality harnesses
* :mod:`~jumpdensity.density` – kernel density estimates of the endpoint law
* :mod:`~jumpdensity.cli` – JSON-driven command-line front end
"""

__version__ = "0.1.0"
