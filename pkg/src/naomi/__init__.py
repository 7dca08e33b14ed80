"""Non-autoregressive multiresolution sequence imputation on a small numpy
autodiff engine, with a billiards simulator, baselines and metrics."""

__version__ = "0.1.0"
