import math

import numpy as np
import torch

from objnerf.datamodel import CameraIntrinsics, Pose, Rng
from objnerf.synthscene import look_at
from objnerf.volrender import (
    NEAR_DISTANCE,
    FieldOutput,
    Ray,
    clip_to_aabb,
    compute_weights,
    image_rays,
    integrate,
    integrate_backward,
    intersect_aabb,
    pixel_ray,
    render_rays,
    sample_distances,
    sample_ray,
)


def _random_samples(n_rays: int, n: int, seed: int) -> tuple:
    gen = torch.Generator().manual_seed(seed)
    sigmas = torch.rand(n_rays, n, dtype=torch.float64, generator=gen) * 5.0
    colors = torch.rand(n_rays, n, 3, dtype=torch.float64, generator=gen)
    gaps = torch.rand(n_rays, n + 1, dtype=torch.float64, generator=gen) + 0.05
    ts = 0.5 + torch.cumsum(gaps, dim=-1) * 0.1
    return sigmas, colors, ts


def test_partition_of_unity() -> None:
    gen = torch.Generator().manual_seed(0)
    sigmas = torch.exp(torch.randn(10_000, 32, generator=gen) * 3.0)
    ts = torch.cumsum(torch.rand(10_000, 33, generator=gen) * 0.05 + 1e-4, dim=-1)
    cache = compute_weights(sigmas, ts)
    total = cache.weights.sum(dim=-1) + cache.final_transmittance
    assert torch.all((total - 1.0).abs() < 1e-5)
    assert torch.all(cache.weights >= 0)
    assert torch.all(cache.transmittance[:, 1:] <= cache.transmittance[:, :-1])
    assert torch.all(cache.final_transmittance <= cache.transmittance[:, -1])


def test_integrate_closed_forms() -> None:
    ts = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    colors = torch.rand(1, 2, 3, dtype=torch.float64)

    empty = integrate(torch.zeros(1, 2, dtype=torch.float64), colors, ts)
    assert torch.all(empty.color == 0) and float(empty.depth) == 0 and float(empty.opacity) == 0

    opaque = integrate(torch.tensor([[20.0, 1.0]], dtype=torch.float64), colors, ts)
    torch.testing.assert_close(opaque.color, colors[:, 0], atol=1e-8, rtol=0)
    assert abs(float(opaque.depth) - 1.0) < 1e-8

    half = compute_weights(torch.tensor([[math.log(2.0), 0.0]], dtype=torch.float64), ts)
    assert abs(float(half.weights[0, 0]) - 0.5) < 1e-12
    assert abs(float(half.transmittance[0, 1]) - 0.5) < 1e-12


def _check_gradients(d_color: torch.Tensor, d_depth: torch.Tensor, d_t: torch.Tensor, seed: int) -> None:
    sigmas, colors, ts = _random_samples(4, 8, seed)
    inputs = [sigmas.requires_grad_(), colors.requires_grad_(), ts.requires_grad_()]

    def objective(s: torch.Tensor, c: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        r = integrate(s, c, t)
        return (r.color * d_color).sum() + (r.depth * d_depth).sum() + (r.transmittance * d_t).sum()

    analytic = torch.autograd.grad(objective(*inputs), inputs)
    h = 1e-6
    for k, x in enumerate(inputs):
        flat = x.detach().reshape(-1)
        for i in range(0, flat.numel(), max(flat.numel() // 12, 1)):
            plus = [y.detach().clone() for y in inputs]
            minus = [y.detach().clone() for y in inputs]
            plus[k].view(-1)[i] += h
            minus[k].view(-1)[i] -= h
            numeric = float(objective(*plus) - objective(*minus)) / (2 * h)
            a = float(analytic[k].reshape(-1)[i])
            assert abs(numeric - a) <= 1e-3 * max(abs(a), 1e-6), (k, i, numeric, a)


def test_backward_matches_finite_differences() -> None:
    gen = torch.Generator().manual_seed(9)
    d_color = torch.randn(4, 3, dtype=torch.float64, generator=gen)
    d_depth = torch.randn(4, dtype=torch.float64, generator=gen)
    d_t = torch.randn(4, dtype=torch.float64, generator=gen)
    _check_gradients(d_color, torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64), 1)
    _check_gradients(torch.zeros(4, 3, dtype=torch.float64), d_depth, torch.zeros(4, dtype=torch.float64), 2)
    _check_gradients(d_color, d_depth, d_t, 3)


def test_integrate_backward_matches_autograd() -> None:
    sigmas, colors, ts = _random_samples(16, 12, seed=4)
    gen = torch.Generator().manual_seed(5)
    d_color = torch.randn(16, 3, dtype=torch.float64, generator=gen)
    d_depth = torch.randn(16, dtype=torch.float64, generator=gen)
    d_t = torch.randn(16, dtype=torch.float64, generator=gen)

    inputs = [x.clone().requires_grad_(True) for x in (sigmas, colors, ts)]
    cache = compute_weights(inputs[0], inputs[2])
    color = (cache.weights[..., None] * inputs[1]).sum(dim=-2)
    depth = (cache.weights * inputs[2][..., :-1]).sum(dim=-1)
    objective = (color * d_color).sum() + (depth * d_depth).sum() + (cache.final_transmittance * d_t).sum()
    expected = torch.autograd.grad(objective, inputs)

    with torch.no_grad():
        cache = compute_weights(sigmas, ts)._replace(colors=colors)
        actual = integrate_backward(d_color, d_depth, d_t, cache)
    for a, e in zip(actual, expected):
        assert torch.allclose(a, e, atol=1e-10), (a - e).abs().max()


def test_single_sample_gradient() -> None:
    sigma = torch.tensor([[0.7]], dtype=torch.float64, requires_grad=True)
    color = torch.tensor([[[0.2, 0.5, 0.9]]], dtype=torch.float64)
    ts = torch.tensor([[1.0, 1.4]], dtype=torch.float64)
    result = integrate(sigma, color, ts)
    (g,) = torch.autograd.grad(result.color[0, 1], sigma)
    assert abs(float(g) - 0.4 * math.exp(-0.7 * 0.4) * 0.5) < 1e-12


def test_zero_density_gives_zero_color_gradient() -> None:
    sigmas = torch.zeros(2, 5, dtype=torch.float64)
    colors = torch.rand(2, 5, 3, dtype=torch.float64, requires_grad=True)
    ts = torch.linspace(1.0, 2.0, 6, dtype=torch.float64).expand(2, 6)
    (g,) = torch.autograd.grad(integrate(sigmas, colors, ts).color.sum(), colors)
    assert torch.all(g == 0)


def test_pixel_ray() -> None:
    intrinsics = CameraIntrinsics(100, 100, 100.0, 100.0, 50.0, 50.0)
    ray = pixel_ray(intrinsics, Pose.identity(), 99.5, 49.5)
    expected = np.array([0.5, 0.0, 1.0]) / np.linalg.norm([0.5, 0.0, 1.0])
    np.testing.assert_allclose(ray.direction, expected, atol=1e-12)
    np.testing.assert_allclose(ray.origin, np.zeros(3))

    pose = look_at([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    center = pixel_ray(intrinsics, pose, 49.5, 49.5)
    np.testing.assert_allclose(center.direction, pose.rotation_matrix()[:, 2], atol=1e-12)
    np.testing.assert_allclose(center.origin, [1.0, 2.0, 3.0])


def test_corner_rays_span_field_of_view() -> None:
    intrinsics = CameraIntrinsics(64, 48, 40.0, 40.0, 32.0, 24.0)
    left = pixel_ray(intrinsics, Pose.identity(), -0.5, 23.5).direction
    right = pixel_ray(intrinsics, Pose.identity(), 63.5, 23.5).direction
    angle = math.acos(float(np.clip(left @ right, -1.0, 1.0)))
    assert abs(angle - 2 * math.atan(64 / (2 * 40.0))) < 1e-9


def test_image_rays_are_unit() -> None:
    intrinsics = CameraIntrinsics.from_fov(16, 12, 60.0)
    origins, directions = image_rays(intrinsics, look_at([0.5, 0.5, 0.5], [0.0, 0.0, 0.0]))
    assert origins.shape == (16 * 12, 3)
    assert torch.all((directions.norm(dim=-1) - 1.0).abs() < 1e-6)


def test_clip_to_aabb() -> None:
    lo, hi = np.zeros(3), np.ones(3)
    clipped = clip_to_aabb(Ray(np.array([-2.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0])), lo, hi)
    assert clipped is not None
    assert abs(clipped.t_near - 2.0) < 1e-12 and abs(clipped.t_far - 3.0) < 1e-12

    parallel = Ray(np.array([-2.0, 1.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    assert clip_to_aabb(parallel, lo, hi) is None

    inside = clip_to_aabb(Ray(np.array([0.5, 0.5, 0.5]), np.array([0.0, 0.0, 1.0])), lo, hi)
    assert inside is not None
    assert inside.t_near == NEAR_DISTANCE and abs(inside.t_far - 0.5) < 1e-12

    behind = Ray(np.array([2.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    assert clip_to_aabb(behind, lo, hi) is None


def test_sample_ray() -> None:
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 2.0)
    np.testing.assert_allclose(sample_ray(ray, 1, None, stratified=False), [1.25, 1.75])

    rng = Rng(0)
    for _ in range(100):
        ts = sample_ray(ray, 16, rng)
        assert ts.shape == (17,)
        assert np.all(np.diff(ts) > 0)
        assert ts[0] >= 1.0 and ts[-1] <= 2.0


def test_stratified_means() -> None:
    n = 10_000
    ts = sample_distances(
        torch.ones(n, dtype=torch.float64), torch.full((n,), 2.0, dtype=torch.float64), 3, Rng(5)
    )
    width = 0.25
    standard_error = width / math.sqrt(12 * n)
    centers = 1.0 + width * (torch.arange(4, dtype=torch.float64) + 0.5)
    assert torch.all((ts.mean(dim=0) - centers).abs() < 3 * standard_error)


class SolidWall:
    """Density 1e4 inside the slab ``z >= wall`` of a box, zero elsewhere."""

    def __init__(self, wall: float):
        self.wall = wall

    def __call__(self, positions: torch.Tensor, directions: torch.Tensor) -> FieldOutput:
        inside = positions[:, 2] >= self.wall
        sigma = torch.where(inside, torch.full_like(positions[:, 2], 1e4), torch.zeros_like(positions[:, 2]))
        return FieldOutput(sigma=sigma, color=torch.full_like(positions, 0.5))


def test_solid_wall_depth() -> None:
    wall = 0.37
    n_samples = 64
    gen = torch.Generator().manual_seed(4)
    origins = torch.cat(
        [torch.rand(32, 2, dtype=torch.float64, generator=gen) * 0.4 + 0.3, torch.full((32, 1), -0.5, dtype=torch.float64)],
        dim=-1,
    )
    directions = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64).expand(32, 3)
    t_near, t_far, hit = intersect_aabb(origins, directions, np.zeros(3), np.ones(3))
    assert bool(hit.all())
    result = render_rays(SolidWall(wall), origins, directions, t_near, t_far, hit, n_samples)
    spacing = float((t_far - t_near)[0]) / (n_samples + 1)
    expected = wall + 0.5
    assert torch.all((result.depth - expected).abs() <= spacing)
    assert torch.all(result.opacity > 0.999)


def test_missed_rays_are_transparent() -> None:
    origins = torch.tensor([[5.0, 5.0, 5.0]], dtype=torch.float64)
    directions = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    t_near, t_far, hit = intersect_aabb(origins, directions, np.zeros(3), np.ones(3))
    assert not bool(hit[0])
    result = render_rays(SolidWall(-10.0), origins, directions, t_near, t_far, hit, 8)
    assert float(result.opacity[0]) == 0.0
