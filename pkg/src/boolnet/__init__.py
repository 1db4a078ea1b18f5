"""Learning compact Boolean networks with learned connections, and compiling
them into prunable, bit-packed Boolean circuits."""

__version__ = "0.1.0"
