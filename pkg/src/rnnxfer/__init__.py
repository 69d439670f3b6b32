"""Transfer learning for recurrent state-space models via Jacobian feature regression."""

__version__ = "0.1.0"
