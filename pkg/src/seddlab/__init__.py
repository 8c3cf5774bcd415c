"""seddlab: a desk-scale lab for score-entropy discrete diffusion text models.

Submodules are imported lazily so entry points can pin thread environment
variables before numpy loads.
"""

__version__ = "0.1.0"
