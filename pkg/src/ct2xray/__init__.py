"""Multi-view X-ray image synthesis from CT volumes via content/style
disentanglement, with a ray-casting DRR renderer for supervision."""

__version__ = "0.1.0"
