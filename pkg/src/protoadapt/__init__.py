"""Prototype-guided adapter fine-tuning for frozen few-shot segmentation models."""

__version__ = "0.1.0"

from .tensor import Parameter, Tensor, no_grad

__all__ = ["Tensor", "Parameter", "no_grad", "__version__"]
