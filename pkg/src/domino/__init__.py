"""Contrastive multimodal pretraining on a numpy autodiff engine.

Subpackages and modules:

* ``ndgrad``: reverse-mode autodiff, ops and the NDCK checkpoint container
* ``datasets``: paired two-view and two-domain image data
* ``model``: encoders, projection heads, decoders
* ``objectives``: InfoNCE edges and the pair-graph loss composer
* ``simsuite``: CCA, SVCCA, PWCCA and linear CKA
* ``trainer``: pretraining, linear evaluation and experiment sweeps
* ``cli``: the ``domino`` command
"""

__version__ = "0.1.0"
