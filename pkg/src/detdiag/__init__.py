"""3D detection evaluation and error diagnosis."""
__version__ = "0.1.0"
