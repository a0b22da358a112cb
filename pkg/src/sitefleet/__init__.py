"""Desk-scale construction site: fleet coordination, route planning,
drone-based person geolocation and a deterministic vehicle simulator,
wired together over a small QoS pub/sub bus.
"""

__version__ = "0.1.0"


class SiteFleetError(Exception):
    """Base class for every error raised by this package."""
