"""Object-compositional neural SDF reconstruction, closed-loop testable
on analytic scenes."""

__version__ = "0.1.0"
