"""
Shared utilities for the self-synthesis meta-learning pipeline
"""
