"""
SMAR - whole-page reranking trained from sparse labels plus single-modality
upstream rankers
"""

__version__ = "0.1.0"
