"""Graph-guided re-identification training engine.

A dual-branch model: a small convolutional backbone produces per-frame
feature maps, while a graph branch passes messages over a spatial-temporal
skeleton of person keypoints and supervises the same features during
training. At inference the graph branch is dropped and only the visual
embeddings are used for matching.
"""

import os

# Cap BLAS threads before numpy loads anywhere in the package. KMP_THREADS
# bounds kernel parallelism; reductions stay deterministic for a fixed cap.
_threads = os.environ.get("KMP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
