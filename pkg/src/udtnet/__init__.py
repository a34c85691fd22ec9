"""Digital-twin-based QoE modeling and resource management for mobile AR delivery."""

__version__ = "0.1.0"
