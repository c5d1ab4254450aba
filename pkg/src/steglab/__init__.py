"""JPEG steganalysis lab: dense-connection CNN, Gabor-residual features,
FLD ensembles and their fusion."""

__version__ = "0.1.0"
