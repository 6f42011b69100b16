"""Event-camera continuous sign language recognition and translation.

Pipeline: event streams -> voxel grids -> sparse conv backbone -> local
token fusion + gloss-aware temporal aggregation -> CTC recognition and
autoregressive translation, trained end-to-end on a bundled synthetic
micro-sign corpus.
"""

__version__ = "0.1.0"
