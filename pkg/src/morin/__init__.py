"""Corank-one singularity strata of coframes on implicit manifolds.

Subpackages are imported lazily by the consumers that need them; importing
``morin`` itself stays cheap.
"""

__version__ = "0.1.0"
