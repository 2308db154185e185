"""moeforge: carve Mixture-of-Experts models out of dense transformers at desk scale."""

__version__ = "0.1.0"
