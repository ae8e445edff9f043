"""Group-time treatment effects under interactive fixed effects in staggered panels."""

__version__ = "0.1.0"
