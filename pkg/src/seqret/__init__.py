"""Retrieval of continuous-time event sequences.

Corpus sequences are ranked against a query by a learned relevance score:
a Fisher-kernel similarity between log-likelihood gradients of a marked
temporal point process, plus a model-free time/mark alignment term, with a
trainable monotone unwarping of query timestamps.  Retrieval over large
corpora is accelerated by trainable binary hash codes over an LSH index.
"""

__version__ = "0.1.0"
