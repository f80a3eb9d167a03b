"""Look-ahead freewheeling control of a heavy truck by mixed-integer MPC."""

__version__ = "0.1.0"
