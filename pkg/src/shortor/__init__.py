"""Via-relay overlay routing simulator for Tor-like relay networks."""

__version__ = "0.1.0"
