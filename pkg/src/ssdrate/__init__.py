"""Constant step-size stochastic dual subgradient descent with rate instrumentation."""
__version__ = "0.1.0"
