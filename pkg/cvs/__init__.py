"""
CvS: classification by segmentation with few labeled masks
"""

__version__ = "0.1.0"
