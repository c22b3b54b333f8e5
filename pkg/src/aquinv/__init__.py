"""Joint inversion of log-conductivity and contaminant release history.

Modules: ``grid`` (geometry, sources, parameter packing), ``forward``
(flow and transport solver), ``observations``, ``autodiff`` and ``layers``
(network operators), ``caae`` (field parameterisation), ``densed``
(surrogate), ``esmda`` (ensemble smoother), ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
