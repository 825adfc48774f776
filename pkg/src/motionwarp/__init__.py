"""Speech-driven 3D facial motion: blendshapes, attentional warping and regression."""

__version__ = "0.1.0"
