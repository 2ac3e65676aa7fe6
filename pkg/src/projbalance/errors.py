"""Shared exception types.

NumericalGuardError marks conditioning/stability guards tripping (the CLI
maps it to exit code 2); ConfigError marks experiment-config problems (exit
code 3).  Everything else raises plain ValueError.
"""

__all__ = ["NumericalGuardError", "ConfigError"]


class NumericalGuardError(RuntimeError):
    """A numerical guard tripped: ill-conditioned Gram, degenerate volume,
    quadrature blow-up.  Usually fixable by a larger node budget or lower k."""


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""
