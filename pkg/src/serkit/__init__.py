"""serkit: a from-scratch speech emotion recognition pipeline.

Everything numerical is built on numpy: WAV decoding and resampling,
log-mel / MFCC features, a reverse-mode autodiff engine, a CNN +
transformer-encoder classifier, Adam with cosine annealing, and the
evaluation metrics. See the README for the command line workflow.
"""

__version__ = "0.1.0"

from .errors import SerkitError

__all__ = ["SerkitError", "__version__"]
