"""bridgecast: probabilistic spatiotemporal forecasting.

A deterministic forecasting branch and a Brownian-bridge video-diffusion
branch are trained jointly; at inference the deterministic forecast seeds a
truncated reverse chain, yielding calibrated forecast ensembles.
"""

__version__ = "0.1.0"
