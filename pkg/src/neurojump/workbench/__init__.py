"""Configuration, file formats, baselines, pipeline stages and the command line.

Submodules import numpy, so this package stays empty at import time and the
CLI can set thread counts first.
"""
