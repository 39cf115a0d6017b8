# Hybrid-Tower text-to-video retrieval

__version__ = "0.1.0"
