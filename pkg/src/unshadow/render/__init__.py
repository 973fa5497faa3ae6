"""Deterministic direct-lighting ray tracer."""

from .core import (  # noqa: F401
    DepthNoiseConfig,
    LightingPerturbConfig,
    RenderConfig,
    RenderError,
    RenderOutputs,
    build_proxy_mesh,
    camera_rays,
    perturb_lighting,
    render_depth,
    render_proxy_pair,
    render_radiance,
)
