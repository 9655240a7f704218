"""Pillar-based 3-D object detection with large-kernel ConvNet backbones."""

__version__ = "0.1.0"

__all__ = ["PillarNeStDetector", "__version__"]


def __getattr__(name):
    # the estimator pulls in scikit-learn; import it only when asked for
    if name == "PillarNeStDetector":
        from .estimator import PillarNeStDetector
        return PillarNeStDetector
    raise AttributeError(f"module 'pillarnest' has no attribute {name!r}")
