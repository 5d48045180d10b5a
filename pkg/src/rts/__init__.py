"""Random temperature scaling: a classification head whose softmax temperature
is an input-dependent Gamma-distributed random variable."""

__version__ = "0.1.0"
