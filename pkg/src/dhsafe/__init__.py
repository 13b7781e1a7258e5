"""dhsafe: learned half-space input constraints and min-norm safety filters."""

__version__ = "0.1.0"
