"""The canonical point autoencoder networks.

A PointNet-style encoder summarises a cloud into a latent code. The canonical
mapping sends each point, concatenated with the latent, to the canonical
space; the inverse mapping sends canonical points, concatenated with a latent,
back to world coordinates. Both mappings are pointwise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, sample_sphere
from .tensor import (
    MLP,
    Linear,
    Module,
    Tensor,
    concat_latent,
    load_checkpoint,
    maxpool_points,
    no_grad,
    save_checkpoint,
)

__all__ = ["ModelConfig", "CpaeModel", "NotNormalizedError", "encode_latent", "canonical_map", "inverse_map",
           "forward_autoencode", "forward_cross", "save_model", "load_model"]

RADIUS_TOLERANCE = 1e-3


class NotNormalizedError(ValueError):
    """Input cloud extends beyond the unit ball."""


@dataclass
class ModelConfig:
    latent_dim: int = 512
    encoder_widths: tuple[int, ...] = (64, 128, 512)
    mapping_widths: tuple[int, ...] = (256, 256)
    batchnorm: bool = True
    sphere_points: int = 4096
    sphere_seed: int | None = None
    seed: int = 0
    normalization: dict = field(default_factory=dict)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name in ("full", "paper"):
            cfg = cls()
        elif name == "desk":
            cfg = cls(latent_dim=64, encoder_widths=(64, 128, 128), mapping_widths=(128, 128), sphere_points=1024)
        else:
            raise ValueError(f"unknown preset {name!r}")
        for key, value in overrides.items():
            setattr(cfg, key, value)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["mapping_widths"] = list(self.mapping_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder_widths"] = tuple(d["encoder_widths"])
        d["mapping_widths"] = tuple(d["mapping_widths"])
        return cls(**d)


class CpaeModel(Module):
    """Encoder E, canonical mapping Phi, inverse mapping Psi and the reference sphere."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.encoder = MLP(3, [(w, "relu", False) for w in cfg.encoder_widths], rng)
        self.to_latent = Linear(cfg.encoder_widths[-1], cfg.latent_dim, rng)
        hidden = [(w, "relu", cfg.batchnorm) for w in cfg.mapping_widths]
        self.phi = MLP(3 + cfg.latent_dim, hidden + [(3, None, False)], rng)
        self.psi = MLP(3 + cfg.latent_dim, hidden + [(3, "tanh", False)], rng)
        self.sphere = sample_sphere(cfg.sphere_points, cfg.sphere_seed).astype(np.float32)
        self.trained = False

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    # The three networks. Inputs are (k, 3) or batched (B, k, 3).
    def encode(self, points) -> Tensor:
        x = _points_tensor(points)
        radius = float(np.sqrt((x.data.astype(np.float64) ** 2).sum(-1)).max())
        if radius > 1.0 + RADIUS_TOLERANCE:
            raise NotNormalizedError(f"cloud radius {radius:.4f} exceeds 1; normalise it first")
        feats = self.encoder(x)
        return self.to_latent(maxpool_points(feats))

    def canonical_map(self, points, z: Tensor) -> Tensor:
        x = _points_tensor(points)
        _check_latent(z, self.latent_dim)
        return self.phi(concat_latent(x, z))

    def inverse_map(self, prim, z: Tensor) -> Tensor:
        u = _points_tensor(prim)
        _check_latent(z, self.latent_dim)
        return self.psi(concat_latent(u, z))

    def autoencode(self, points) -> tuple[Tensor, Tensor, Tensor]:
        x = _points_tensor(points)
        z = self.encode(x)
        u = self.canonical_map(x, z)
        return z, u, self.inverse_map(u, z)

    def cross(self, points_a, points_b) -> tuple[Tensor, Tensor]:
        a, b = _points_tensor(points_a), _points_tensor(points_b)
        za, zb = self.encode(a), self.encode(b)
        ua, ub = self.canonical_map(a, za), self.canonical_map(b, zb)
        return self.inverse_map(ua, zb), self.inverse_map(ub, za)

    def predict(self, points) -> dict[str, np.ndarray]:
        """Inference-mode latent, primitive and reconstruction as arrays."""
        with no_grad():
            z, u, s = self.autoencode(points)
        return {"z": z.data, "primitive": u.data, "reconstruction": s.data}


def _points_tensor(points) -> Tensor:
    if isinstance(points, PointCloud):
        points = points.points
    if isinstance(points, Tensor):
        t = points
    else:
        t = Tensor(np.asarray(points, dtype=np.float32))
    if t.shape[-1] != 3 or t.ndim not in (2, 3):
        raise ValueError(f"expected (k, 3) or (B, k, 3) points, got {t.shape}")
    return t


def _check_latent(z: Tensor, dim: int) -> None:
    if z.shape[-1] != dim:
        raise ValueError(f"latent has size {z.shape[-1]}, model expects {dim}")


# Functional forms; they run the model in whatever mode it is in.
def encode_latent(cloud, model: CpaeModel) -> Tensor:
    return model.encode(cloud)


def canonical_map(cloud, z: Tensor, model: CpaeModel) -> Tensor:
    return model.canonical_map(cloud, z)


def inverse_map(prim, z: Tensor, model: CpaeModel) -> Tensor:
    return model.inverse_map(prim, z)


def forward_autoencode(cloud, model: CpaeModel) -> tuple[Tensor, Tensor, Tensor]:
    return model.autoencode(cloud)


def forward_cross(cloud_a, cloud_b, model: CpaeModel) -> tuple[Tensor, Tensor]:
    return model.cross(cloud_a, cloud_b)


def save_model(model: CpaeModel, directory: str | Path) -> None:
    """Write ``model.cpae`` (parameters and BatchNorm statistics) and ``model.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / "model.cpae", model.state_dict())
    meta = {"config": model.config.to_dict(), "trained": model.trained}
    (directory / "model.json").write_text(json.dumps(meta, indent=2))


def load_model(directory: str | Path) -> CpaeModel:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    model = CpaeModel(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(load_checkpoint(directory / "model.cpae"))
    model.trained = bool(meta.get("trained", False))
    return model.eval()
