"""
Test suite for rhflow
"""
