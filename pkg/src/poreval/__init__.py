"""Quantitative assessment of generated microscopy stacks of tubular
porosity networks: image quality metrics, vesselness segmentation,
connected-component matching, skeleton graph metrics and rank statistics.
"""

__version__ = "0.1.0"
