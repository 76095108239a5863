"""Zero-depth Kolmogorov-Arnold models on lifted features for equation discovery."""
__version__ = "0.3.0"
