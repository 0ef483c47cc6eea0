"""Retinal vessel segmentation with a pulse-coupled enhancement front end.

Everything runs on a small numpy autodiff core; see the submodules:
``tensor``/``ops`` (autodiff), ``preprocess``, ``dpcn``, ``msu``, ``m2net``,
``loss``, ``metrics``, ``phantom`` and the ``cli``.
"""

__version__ = "0.1.0"
