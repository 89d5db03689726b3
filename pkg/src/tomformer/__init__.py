"""TomFormer: a small detection transformer built on a numpy autodiff core."""

__version__ = "0.1.0"
