"""Caption-bottleneck auto-encoder over a synthetic scene world, trained with
group-relative policy optimization on a reconstruction reward."""

__version__ = "0.1.0"
