"""NMPC trajectory planning for urban driving in the curvilinear road frame."""

__version__ = "0.1.0"
