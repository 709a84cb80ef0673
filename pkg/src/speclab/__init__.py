"""Finite-difference toolkit for negative spectra of Schroedinger operators.

Modules: ``grid`` (domains, fields, operators), ``potentials`` (generators),
``spectra`` (counting and eigensolves), ``bounds`` (certificates),
``decompose`` (coverings and partitions of unity), ``gauge`` (ground-state
transform), ``measure`` (spectral measures and entropy) and ``cli``.
"""

__version__ = "0.1.0"
