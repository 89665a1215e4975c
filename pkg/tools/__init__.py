"""
Standalone tools for RKESim: full-budget acceptance experiments.
"""
