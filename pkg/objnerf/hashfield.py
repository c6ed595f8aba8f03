"""
Per-object radiance field: multiresolution hash grid encoding followed by a density MLP and
a view-dependent color MLP.
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import numpy.typing as npt
import torch
import torch.nn as nn

from objnerf.config import FieldConfig, HashGridConfig
from objnerf.errors import DivergenceError
from objnerf.volrender import FieldOutput

logger = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)

_CORNERS = [(i & 1, (i >> 1) & 1, (i >> 2) & 1) for i in range(8)]


class HashGridEncoding(nn.Module):
    """
    Multiresolution hash grid over an axis-aligned box.

    Level ``l`` has ``N_l`` cells per axis and ``N_l + 1`` corners. Levels whose dense corner
    grid fits into the table are indexed directly, the others through a spatial hash.

    :param force_hash: Use the spatial hash on every level (used to check both layouts agree).
    """

    def __init__(
        self,
        config: HashGridConfig,
        aabb_min: npt.ArrayLike,
        aabb_max: npt.ArrayLike,
        init_scale: float = 1e-4,
        force_hash: bool = False,
    ):
        super().__init__()
        self.config = config
        self.resolutions: List[int] = config.resolutions()
        self.force_hash = force_hash
        self.register_buffer("aabb_min", torch.as_tensor(np.asarray(aabb_min, dtype=np.float32)))
        self.register_buffer("aabb_max", torch.as_tensor(np.asarray(aabb_max, dtype=np.float32)))
        self.embeddings = nn.Parameter(
            torch.empty(config.n_levels, config.table_size, config.features_per_entry)
        )
        nn.init.uniform_(self.embeddings, -init_scale, init_scale)

    @property
    def out_dim(self) -> int:
        return self.config.n_levels * self.config.features_per_entry

    def is_dense(self, level: int) -> bool:
        return (self.resolutions[level] + 1) ** 3 <= self.config.table_size

    def corner_indices(
        self, level: int, corners: torch.Tensor, force_hash: bool = False
    ) -> torch.Tensor:
        """Table indices of integer corner coordinates ``corners`` (``... x 3``) at ``level``."""
        corners = corners.long()
        if self.is_dense(level) and not (force_hash or self.force_hash):
            side = self.resolutions[level] + 1
            return corners[..., 0] + side * (corners[..., 1] + side * corners[..., 2])
        h = corners[..., 0] * PRIMES[0]
        h = torch.bitwise_xor(h, corners[..., 1] * PRIMES[1])
        h = torch.bitwise_xor(h, corners[..., 2] * PRIMES[2])
        return torch.remainder(h, self.config.table_size)

    def normalize(self, positions: torch.Tensor) -> torch.Tensor:
        x = (positions - self.aabb_min) / (self.aabb_max - self.aabb_min)
        return x.clamp(0.0, 1.0)

    def interpolation(
        self, level: int, positions: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns the 8 corner indices and trilinear weights of ``positions`` at ``level``."""
        resolution = self.resolutions[level]
        scaled = self.normalize(positions) * resolution
        cell = torch.floor(scaled).clamp(max=resolution - 1)
        frac = scaled - cell
        base = cell.long()
        indices = []
        weights = []
        for corner in _CORNERS:
            offset = torch.tensor(corner, device=base.device)
            indices.append(self.corner_indices(level, base + offset))
            w = torch.ones_like(frac[..., 0])
            for axis, bit in enumerate(corner):
                w = w * (frac[..., axis] if bit else 1.0 - frac[..., axis])
            weights.append(w)
        return torch.stack(indices, dim=-1), torch.stack(weights, dim=-1)

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        features = []
        for level in range(self.config.n_levels):
            indices, weights = self.interpolation(level, positions)
            table = self.embeddings[level]
            corner_features = table[indices]
            features.append((weights[..., None] * corner_features).sum(dim=-2))
        return torch.cat(features, dim=-1)


def spherical_harmonics(directions: torch.Tensor, degree: int = 4) -> torch.Tensor:
    """Real spherical harmonics basis with ``degree**2`` components for unit ``directions``."""
    assert 1 <= degree <= 4, f"Spherical harmonics degree must be in [1, 4], got {degree}"
    x, y, z = directions[..., 0], directions[..., 1], directions[..., 2]
    components = [torch.full_like(x, 0.28209479177387814)]
    if degree > 1:
        components += [0.4886025119029199 * y, 0.4886025119029199 * z, 0.4886025119029199 * x]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        components += [
            1.0925484305920792 * x * y,
            1.0925484305920792 * y * z,
            0.9461746957575601 * zz - 0.31539156525251999,
            1.0925484305920792 * x * z,
            0.5462742152960396 * (xx - yy),
        ]
    if degree > 3:
        components += [
            0.5900435899266435 * y * (3 * xx - yy),
            2.890611442640554 * x * y * z,
            0.4570457994644658 * y * (5 * zz - 1),
            0.3731763325901154 * z * (5 * zz - 3),
            0.4570457994644658 * x * (5 * zz - 1),
            1.445305721320277 * z * (xx - yy),
            0.5900435899266435 * x * (xx - 3 * yy),
        ]
    return torch.stack(components, dim=-1)


def _mlp(in_dim: int, width: int, hidden_layers: int, out_dim: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    for i in range(hidden_layers):
        layers += [nn.Linear(in_dim if i == 0 else width, width, bias=False), nn.ReLU()]
    layers.append(nn.Linear(width if hidden_layers > 0 else in_dim, out_dim, bias=False))
    return nn.Sequential(*layers)


class ObjectField(nn.Module):
    """
    Radiance field of a single object, defined inside the object's bounding box.

    Density is ``exp(min(raw, max_log_density))``, color is the sigmoid of the color MLP whose
    input is the density MLP's latent output concatenated with the spherical harmonics
    encoding of the view direction.
    """

    def __init__(
        self,
        config: FieldConfig,
        aabb_min: npt.ArrayLike,
        aabb_max: npt.ArrayLike,
        force_hash: bool = False,
    ):
        super().__init__()
        self.config = config
        self.encoding = HashGridEncoding(
            config.grid, aabb_min, aabb_max, config.grid_init_scale, force_hash
        )
        self.density_mlp = _mlp(
            self.encoding.out_dim,
            config.hidden_width,
            config.density_layers,
            1 + config.latent_dim,
        )
        self.color_mlp = _mlp(
            config.latent_dim + config.sh_degree**2,
            config.hidden_width,
            config.color_layers,
            3,
        )

    @property
    def aabb(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.encoding.aabb_min, self.encoding.aabb_max

    def forward(self, positions: torch.Tensor, directions: torch.Tensor) -> FieldOutput:
        h = self.density_mlp(self.encoding(positions))
        raw, latent = h[..., 0], h[..., 1:]
        sigma = torch.exp(torch.clamp(raw, max=self.config.max_log_density))
        sh = spherical_harmonics(directions, self.config.sh_degree)
        color = torch.sigmoid(self.color_mlp(torch.cat([latent, sh], dim=-1)))
        if not (torch.isfinite(sigma).all() and torch.isfinite(color).all()):
            check_parameters(self)
        return FieldOutput(sigma=sigma, color=color)


def check_parameters(field: nn.Module, step: Optional[int] = None) -> None:
    for name, p in field.named_parameters():
        if not torch.isfinite(p).all():
            logger.error(f"non-finite values in parameter {name}")
            raise DivergenceError("diverged parameters", step)


def encode(field: ObjectField, positions: torch.Tensor) -> torch.Tensor:
    return field.encoding(positions)  # type: ignore


class FieldCache(NamedTuple):
    positions: torch.Tensor
    output: FieldOutput


class FieldGradients(NamedTuple):
    params: Dict[str, torch.Tensor]
    positions: torch.Tensor


def field_forward(
    field: ObjectField, positions: torch.Tensor, view_dirs: torch.Tensor
) -> Tuple[FieldOutput, FieldCache]:
    """Evaluates ``field`` and records the graph needed by :func:`field_backward`."""
    norms = view_dirs.norm(dim=-1)
    assert torch.all((norms - 1.0).abs() <= 1e-6), "View directions must have unit norm"
    with torch.enable_grad():
        positions = positions.detach().requires_grad_(True)
        output = field(positions, view_dirs)
    return output, FieldCache(positions, output)


def field_backward(
    d_sigma: torch.Tensor,
    d_color: torch.Tensor,
    cache: FieldCache,
    field: ObjectField,
) -> FieldGradients:
    """Reverse-mode gradients of the cached forward pass for every parameter and the positions."""
    names = [name for name, _ in field.named_parameters()]
    params = [p for _, p in field.named_parameters()]
    grads = torch.autograd.grad(
        outputs=[cache.output.sigma, cache.output.color],
        inputs=params + [cache.positions],
        grad_outputs=[d_sigma, d_color],
        retain_graph=True,
        allow_unused=True,
    )
    filled = [torch.zeros_like(x) if g is None else g for g, x in zip(grads, params + [cache.positions])]
    return FieldGradients(
        params=dict(zip(names, filled[:-1])),
        positions=filled[-1],
    )
