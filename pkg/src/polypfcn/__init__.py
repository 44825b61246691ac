"""Polyp segmentation in colonoscopy frames with a miniature FCN-8S.

Training patches are drawn from polyp interior, polyp boundary and background
regions of rotated frames; test-phase probability maps are binarized with
Otsu's method and reduced to their largest connected component.
"""

__version__ = "0.1.0"
