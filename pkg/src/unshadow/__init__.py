"""unshadow: object + cast-shadow removal with approximate scene proxies.

Subpackages cover the full pipeline: synthetic scene generation, a direct
lighting ray tracer, training-sample assembly, the four-network removal
model, its losses and training schedule, and the RMSE metric harness.
"""

__version__ = "0.1.0"
