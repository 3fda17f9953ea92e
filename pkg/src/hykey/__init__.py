"""Spectral-spatial keypoint detection and description for hyperspectral cubes."""

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "NonFiniteError", "ShapeError", "__version__"]

_AUTODIFF_NAMES = {"Tensor", "Tape", "NonFiniteError", "ShapeError"}


def __getattr__(name):
    # deferred so the CLI can pin BLAS thread env vars before numpy loads
    if name in _AUTODIFF_NAMES:
        from . import autodiff

        return getattr(autodiff, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
