"""Binary neural networks with information-maximizing binarization and a
distribution-sensitive two-stage gradient estimator."""

__version__ = "0.1.0"
