"""Learning hidden physics in SDEs by moment matching through sigma-point ODEs."""

__version__ = "0.1.0"
