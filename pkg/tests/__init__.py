"""
Test package for the MLGSC hyperspectral clustering toolkit.
"""
