"""Glue-deposit volume inspection pipeline.

Submodules are imported explicitly (``from gluevol import geom3d``) rather
than re-exported here, so the CLI can pin BLAS thread environment variables
before anything pulls in numpy.
"""

__version__ = "0.1.0"
