"""
Core functionality for the RKESim project.
"""

__version__ = "1.0.0"
