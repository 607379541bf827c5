"""
OpenSetMargin - Open-set domain adaptation package.
Trains an encoder/generator/discriminator stack that aligns a labeled source domain with an unlabeled target
domain while pushing target-only classes out to an adaptive margin around the known-class centroids.
"""

__version__ = '1.0.0'
