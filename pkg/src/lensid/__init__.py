"""LensID: lens irregularity analysis for cataract surgery videos."""

__version__ = "0.1.0"
