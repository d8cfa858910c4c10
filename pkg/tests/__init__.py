"""
Test package for the SMS slice-diffusion reconstruction toolkit.
"""
