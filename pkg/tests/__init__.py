"""
Test suite for faalab
"""
