"""
Differentiable volume rendering along camera rays.

Rays are sampled at ``N + 1`` distances ``t_0 < ... < t_N``. The field is evaluated at the
left endpoints ``t_0 .. t_{N-1}`` and each sample covers the interval up to the next
distance, ``delta_i = t_{i+1} - t_i``.
"""
import math
from dataclasses import dataclass
from typing import Any, NamedTuple, Optional, Protocol, Tuple

import numpy as np
import numpy.typing as npt
import torch

from objnerf.datamodel import CameraIntrinsics, Pose, Rng

NEAR_DISTANCE = 0.01


class FieldOutput(NamedTuple):
    sigma: torch.Tensor
    color: torch.Tensor


class RadianceField(Protocol):
    def __call__(self, positions: torch.Tensor, directions: torch.Tensor) -> FieldOutput:
        ...


@dataclass(frozen=True, eq=False)
class Ray:
    origin: npt.NDArray[np.float64]
    direction: npt.NDArray[np.float64]
    t_near: float = 0.0
    t_far: float = math.inf


@dataclass
class RenderResult:
    """
    Expected color, expected depth and final transmittance of a batch of rays.

    :param color: ``R x 3`` expected colors.
    :param depth: ``R`` expected distances (not normalized by opacity).
    :param transmittance: ``R`` transmittance remaining after the last sample.
    """

    color: torch.Tensor
    depth: torch.Tensor
    transmittance: torch.Tensor

    @property
    def opacity(self) -> torch.Tensor:
        return 1.0 - self.transmittance


def camera_directions(
    intrinsics: CameraIntrinsics,
    us: torch.Tensor,
    vs: torch.Tensor,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Unit ray directions in camera coordinates through the centers of pixels ``(us, vs)``."""
    x = (us.to(torch.float64) + 0.5 - intrinsics.cx) / intrinsics.fx
    y = (vs.to(torch.float64) + 0.5 - intrinsics.cy) / intrinsics.fy
    d = torch.stack([x, y, torch.ones_like(x)], dim=-1)
    return (d / d.norm(dim=-1, keepdim=True)).to(dtype)


def pixel_ray(intrinsics: CameraIntrinsics, pose: Pose, u: float, v: float) -> Ray:
    d_cam = camera_directions(
        intrinsics, torch.tensor([u]), torch.tensor([v]), dtype=torch.float64
    )[0].numpy()
    d = pose.rotation_matrix() @ d_cam
    return Ray(origin=pose.translation.copy(), direction=d / np.linalg.norm(d))


def pixel_grid(intrinsics: CameraIntrinsics) -> Tuple[torch.Tensor, torch.Tensor]:
    """Row-major ``(us, vs)`` coordinates of every pixel."""
    vs, us = torch.meshgrid(
        torch.arange(intrinsics.height), torch.arange(intrinsics.width), indexing="ij"
    )
    return us.reshape(-1), vs.reshape(-1)


def image_rays(
    intrinsics: CameraIntrinsics, pose: Pose, dtype: torch.dtype = torch.float64
) -> Tuple[torch.Tensor, torch.Tensor]:
    """World-space origins and unit directions of all pixel rays of one image, row-major."""
    us, vs = pixel_grid(intrinsics)
    d_cam = camera_directions(intrinsics, us, vs, dtype=torch.float64)
    rotation = torch.as_tensor(pose.rotation_matrix())
    directions = d_cam @ rotation.T
    origins = torch.as_tensor(pose.translation).expand_as(directions)
    return origins.to(dtype), directions.to(dtype)


def intersect_aabb(
    origins: torch.Tensor,
    directions: torch.Tensor,
    aabb_min: Any,
    aabb_max: Any,
    near: float = NEAR_DISTANCE,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Slab test of a batch of rays against a box.

    Returns ``(t_near, t_far, hit)`` where ``t_near`` is the entry distance clamped to
    ``near`` and ``hit`` marks rays with ``t_far > t_near``.
    """
    lo = torch.as_tensor(aabb_min, dtype=origins.dtype, device=origins.device)
    hi = torch.as_tensor(aabb_max, dtype=origins.dtype, device=origins.device)
    parallel = directions == 0
    safe = torch.where(parallel, torch.ones_like(directions), directions)
    t0 = (lo - origins) / safe
    t1 = (hi - origins) / safe
    t_min = torch.minimum(t0, t1)
    t_max = torch.maximum(t0, t1)
    inside = (origins >= lo) & (origins <= hi)
    inf = torch.full_like(t_min, math.inf)
    t_min = torch.where(parallel, torch.where(inside, -inf, inf), t_min)
    t_max = torch.where(parallel, torch.where(inside, inf, -inf), t_max)
    entry = t_min.max(dim=-1).values
    exit = t_max.min(dim=-1).values
    t_near = torch.clamp(entry, min=near)
    hit = exit > t_near
    return t_near, exit, hit


def clip_to_aabb(
    ray: Ray, aabb_min: npt.ArrayLike, aabb_max: npt.ArrayLike
) -> Optional[Ray]:
    t_near, t_far, hit = intersect_aabb(
        torch.tensor(ray.origin, dtype=torch.float64)[None],
        torch.tensor(ray.direction, dtype=torch.float64)[None],
        np.asarray(aabb_min, dtype=np.float64),
        np.asarray(aabb_max, dtype=np.float64),
    )
    if not bool(hit[0]):
        return None
    return Ray(ray.origin, ray.direction, float(t_near[0]), float(t_far[0]))


def sample_distances(
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    n_samples: int,
    rng: Optional[Rng] = None,
) -> torch.Tensor:
    """
    Splits ``[t_near, t_far]`` into ``n_samples + 1`` equal strata and draws one distance
    per stratum: uniformly when ``rng`` is given, at the stratum midpoint otherwise.
    """
    n_rays = t_near.shape[0]
    strata = n_samples + 1
    if rng is None:
        jitter = torch.full((n_rays, strata), 0.5, dtype=t_near.dtype, device=t_near.device)
    else:
        jitter = torch.as_tensor(
            rng.uniform((n_rays, strata)), dtype=t_near.dtype, device=t_near.device
        )
    k = torch.arange(strata, dtype=t_near.dtype, device=t_near.device)
    width = (t_far - t_near)[:, None] / strata
    return t_near[:, None] + (k[None, :] + jitter) * width


def sample_ray(ray: Ray, n_samples: int, rng: Optional[Rng], stratified: bool = True) -> npt.NDArray[np.float64]:
    ts = sample_distances(
        torch.tensor([ray.t_near], dtype=torch.float64),
        torch.tensor([ray.t_far], dtype=torch.float64),
        n_samples,
        rng if stratified else None,
    )
    return ts[0].numpy()  # type: ignore


class IntegrationCache(NamedTuple):
    sigmas: torch.Tensor
    colors: torch.Tensor
    ts: torch.Tensor
    weights: torch.Tensor
    transmittance: torch.Tensor
    final_transmittance: torch.Tensor


def compute_weights(sigmas: torch.Tensor, ts: torch.Tensor) -> IntegrationCache:
    deltas = ts[..., 1:] - ts[..., :-1]
    tau = sigmas * deltas
    accumulated = torch.cumsum(tau, dim=-1)
    transmittance = torch.exp(-(accumulated - tau))
    weights = transmittance * -torch.expm1(-tau)
    final = torch.exp(-accumulated[..., -1])
    return IntegrationCache(
        sigmas=sigmas,
        colors=torch.empty(0),
        ts=ts,
        weights=weights,
        transmittance=transmittance,
        final_transmittance=final,
    )


def integrate_backward(
    d_color: torch.Tensor,
    d_depth: torch.Tensor,
    d_transmittance: torch.Tensor,
    cache: IntegrationCache,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Reverse mode of :func:`integrate`. Returns gradients with respect to sigmas, colors and ts.

    With ``tau_i = sigma_i delta_i`` and ``g_i = d_color . c_i + d_depth t_i`` the gradient of
    the rendered quantities with respect to ``tau_k`` is
    ``T_{k+1} g_k - sum_{i>k} w_i g_i - T_final d_transmittance``.
    """
    sigmas, colors, ts, weights, transmittance, final = cache
    n = sigmas.shape[-1]
    deltas = ts[..., 1:] - ts[..., :-1]
    nodes = ts[..., :n]
    g = (colors * d_color[..., None, :]).sum(dim=-1) + nodes * d_depth[..., None]
    wg = weights * g
    suffix = torch.flip(torch.cumsum(torch.flip(wg, [-1]), dim=-1), [-1]) - wg
    next_transmittance = transmittance - weights
    d_tau = next_transmittance * g - suffix - (final * d_transmittance)[..., None]

    d_sigmas = d_tau * deltas
    d_deltas = d_tau * sigmas
    d_colors = weights[..., None] * d_color[..., None, :]
    d_ts = torch.zeros_like(ts)
    d_ts[..., :n] += weights * d_depth[..., None] - d_deltas
    d_ts[..., 1:] += d_deltas
    return d_sigmas, d_colors, d_ts


class _VolumeIntegral(torch.autograd.Function):
    @staticmethod
    def forward(  # type: ignore
        ctx: Any, sigmas: torch.Tensor, colors: torch.Tensor, ts: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        cache = compute_weights(sigmas, ts)
        n = sigmas.shape[-1]
        color = (cache.weights[..., None] * colors).sum(dim=-2)
        depth = (cache.weights * ts[..., :n]).sum(dim=-1)
        ctx.save_for_backward(
            sigmas, colors, ts, cache.weights, cache.transmittance, cache.final_transmittance
        )
        return color, depth, cache.final_transmittance

    @staticmethod
    def backward(  # type: ignore
        ctx: Any,
        d_color: torch.Tensor,
        d_depth: torch.Tensor,
        d_transmittance: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        cache = IntegrationCache(*ctx.saved_tensors)
        return integrate_backward(d_color, d_depth, d_transmittance, cache)


def integrate(sigmas: torch.Tensor, colors: torch.Tensor, ts: torch.Tensor) -> RenderResult:
    """
    Quadrature of the volume rendering integral.

    :param sigmas: ``R x N`` densities at the left endpoints.
    :param colors: ``R x N x 3`` colors at the left endpoints.
    :param ts: ``R x (N + 1)`` strictly increasing sample distances.
    """
    assert ts.shape[-1] == sigmas.shape[-1] + 1, (
        f"Expected {sigmas.shape[-1] + 1} distances for {sigmas.shape[-1]} samples, got {ts.shape[-1]}"
    )
    color, depth, transmittance = _VolumeIntegral.apply(sigmas, colors, ts)
    return RenderResult(color=color, depth=depth, transmittance=transmittance)


def render_rays(
    field: RadianceField,
    origins: torch.Tensor,
    directions: torch.Tensor,
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    hit: torch.Tensor,
    n_samples: int,
    rng: Optional[Rng] = None,
    dtype: Optional[torch.dtype] = None,
) -> RenderResult:
    """
    Renders rays through ``field``.

    Gradients flow to the field and to ``origins`` and ``directions``, both through the
    sample positions and through the box distances ``t_near``/``t_far`` when those were
    computed from the rays with autograd enabled. Sample positions are formed in the
    dtype of ``origins`` and cast to ``dtype`` when one is given.
    Rays that miss the box render as fully transparent.
    """
    t_near = torch.where(hit, t_near, torch.zeros_like(t_near))
    t_far = torch.where(hit, t_far, t_near + 1.0)
    ts = sample_distances(t_near, t_far, n_samples, rng)
    nodes = ts[:, :n_samples]
    positions = origins[:, None, :] + nodes[..., None] * directions[:, None, :]
    view_dirs = directions[:, None, :].expand(-1, n_samples, -1)
    if dtype is not None:
        positions = positions.to(dtype)
        view_dirs = view_dirs.to(dtype)
        ts = ts.to(dtype)
    out = field(positions.reshape(-1, 3), view_dirs.reshape(-1, 3))
    sigmas = out.sigma.reshape(-1, n_samples) * hit[:, None].to(out.sigma.dtype)
    colors = out.color.reshape(-1, n_samples, 3)
    return integrate(sigmas, colors, ts.to(sigmas.dtype))
