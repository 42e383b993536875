"""
Test package for collabdet.
"""
