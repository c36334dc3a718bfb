"""Transfer-learning diffusion-convolutional recurrent forecasting on partitioned sensor graphs."""

__version__ = "0.1.0"

from .estimator import DCRNNForecaster  # noqa: E402

__all__ = ["DCRNNForecaster", "__version__"]
