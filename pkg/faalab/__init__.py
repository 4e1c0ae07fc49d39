"""
Face-voice association laboratory - fuse-after-align training on synthetic identities
"""

__version__ = "0.1.0"
