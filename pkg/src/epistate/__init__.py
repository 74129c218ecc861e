"""Bayesian epidemic-state estimation toolkit.

Fits a discrete-time SIR model with a time-varying contact rate to daily
deaths, cases, tests, and random-sample prevalence surveys; estimates the
infection fatality rate, daily new infections, the reproductive number, and
case-undercount factors; and projects the epidemic forward under vaccination
scenarios.
"""

__version__ = "0.1.0"
