"""Ranking-regularized neural response generation at desk scale."""

__version__ = "0.1.0"

__all__ = ["ResponseGenerator", "__version__"]


def __getattr__(name):
    # lazy so that low-level modules stay importable without sklearn
    if name == "ResponseGenerator":
        from .estimator import ResponseGenerator

        return ResponseGenerator
    raise AttributeError(name)
