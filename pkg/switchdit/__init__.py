"""
switchdit - timestep-gated sparse mixture-of-experts diffusion transformers
at desk scale.
"""

__version__ = "1.0.0"
