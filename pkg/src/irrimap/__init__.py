"""Dry-season irrigation detection from decameter vegetation-index timeseries.

Library + CLI covering the full pipeline: scene mosaicking, temporal
endmember unmixing, label curation, admissibility filtering, classifier
training with withheld-region evaluation, transferability diagnostics, and
raster inference with change accounting.  A synthetic phenology generator
provides ground truth for desk-scale verification of every stage.
"""

__version__ = "0.1.0"
