"""Learning-curve comparison figures from training-run CSV files."""

from .plotting import Curve, band_envelope, plot_curves, read_curve_csv

__version__ = "0.1.0"

__all__ = ["Curve", "band_envelope", "plot_curves", "read_curve_csv", "__version__"]
