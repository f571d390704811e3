"""Aspect-based sentiment analysis as sentence-pair classification.

Pipeline: corpus -> auxiliary-sentence pairs -> WordPiece encoding ->
transformer encoder + linear head -> decoded aspect polarities -> metrics.
"""

__version__ = "0.1.0"
