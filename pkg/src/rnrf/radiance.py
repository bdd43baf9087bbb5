"""Color/density network over canonical space.

The trunk sees only the encoded canonical position (with a mid-trunk skip
re-injection), and the density head taps the trunk directly, so density is
structurally independent of view direction and appearance conditioning.
View direction, the per-frame appearance code and, in conditioning mode C,
the head parameters and deformation features feed one color-branch layer
after the density head.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .deformation import EncoderConfig, encode
from .errors import ParameterError

APPEAR_CODE_DIM = 8

# softplus(raw - SIGMA_SHIFT): zero-initialized heads give near-zero density,
# while the default bias init below starts from a light fog that trains well
SIGMA_SHIFT = 8.0
SIGMA_BIAS_INIT = 7.0


class ConditioningMode(str, enum.Enum):
    """Ablation wiring of the two networks.

    A: deformation net conditioned directly on head parameters; appearance not
       parameter-conditioned.
    B: deformation net conditioned on the encoded prior deformation; appearance
       not parameter-conditioned.
    C: B plus parameter- and feature-conditioned appearance (the full model).
    """

    A = "A"
    B = "B"
    C = "C"


@dataclass(frozen=True)
class RadianceConfig:
    depth: int = 8
    width: int = 256
    color_width: int = 128
    pos_bands: int = 10
    dir_bands: int = 4
    appear_dim: int = APPEAR_CODE_DIM
    beta_dim: int = 0  # E + 7, wired only in mode C
    feature_dim: int = 0  # deformation feature width, wired only in mode C
    mode: ConditioningMode = ConditioningMode.C

    @property
    def skip_at(self) -> int:
        return self.depth // 2 + 1

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.pos_bands

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_bands

    @property
    def color_cond_dims(self):
        dims = [self.dir_dim, self.appear_dim]
        if self.mode == ConditioningMode.C:
            dims += [self.beta_dim, self.feature_dim]
        return dims


class RadianceMLP:
    def __init__(self, cfg: RadianceConfig, rng: np.random.Generator, dtype=np.float32,
                 zero_heads: bool = False):
        if cfg.depth < 2:
            raise ParameterError("radiance trunk needs depth >= 2")
        if cfg.mode == ConditioningMode.C and (cfg.beta_dim <= 0 or cfg.feature_dim <= 0):
            raise ParameterError("mode C requires beta_dim and feature_dim")
        self.cfg = cfg
        self.dtype = dtype
        self.pos_encoder = EncoderConfig(num_bands=cfg.pos_bands)
        self.dir_encoder = EncoderConfig(num_bands=cfg.dir_bands)

        # each trunk layer is (weight blocks, bias); the skip layer carries a
        # second block applied to the re-injected position encoding
        self.trunk = []
        in_dim = cfg.pos_dim
        for i in range(cfg.depth):
            ws = [_he(rng, (in_dim, cfg.width), dtype)]
            if i == cfg.skip_at - 1 and i > 0:
                ws.append(_he(rng, (cfg.pos_dim, cfg.width), dtype))
            b = Tensor(np.zeros(cfg.width, dtype=dtype), requires_grad=True)
            self.trunk.append((ws, b))
            in_dim = cfg.width

        if zero_heads:
            self.w_sigma = Tensor(np.zeros((cfg.width, 1), dtype=dtype), requires_grad=True)
            self.b_sigma = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        else:
            self.w_sigma = _he(rng, (cfg.width, 1), dtype)
            self.b_sigma = Tensor(np.full(1, SIGMA_BIAS_INIT, dtype=dtype), requires_grad=True)

        cond_dims = [cfg.width] + cfg.color_cond_dims
        self.w_color_in = [_he(rng, (d, cfg.color_width), dtype) for d in cond_dims]
        self.b_color_in = Tensor(np.zeros(cfg.color_width, dtype=dtype), requires_grad=True)
        if zero_heads:
            self.w_rgb = Tensor(np.zeros((cfg.color_width, 3), dtype=dtype), requires_grad=True)
        else:
            self.w_rgb = _he(rng, (cfg.color_width, 3), dtype)
        self.b_rgb = Tensor(np.zeros(3, dtype=dtype), requires_grad=True)

    def parameters(self):
        out = []
        for i, (ws, b) in enumerate(self.trunk):
            for j, w in enumerate(ws):
                name = f"radiance.trunk{i}.weight" if j == 0 else f"radiance.trunk{i}.skip_weight"
                out.append((name, w))
            out.append((f"radiance.trunk{i}.bias", b))
        out += [("radiance.sigma.weight", self.w_sigma), ("radiance.sigma.bias", self.b_sigma)]
        for i, w in enumerate(self.w_color_in):
            out.append((f"radiance.color_in{i}.weight", w))
        out.append(("radiance.color_in.bias", self.b_color_in))
        out += [("radiance.rgb.weight", self.w_rgb), ("radiance.rgb.bias", self.b_rgb)]
        return out

    def density(self, x_can):
        """Density from encoded canonical positions only. x_can: (N,3)."""
        enc = encode(x_can, self.pos_encoder)
        h = self._trunk(enc)
        return self._sigma(h)

    def _trunk(self, enc):
        h = enc
        for ws, b in self.trunk:
            if len(ws) == 2:
                h = ad.affine_multi_relu([h, enc], ws, b)
            else:
                h = ad.affine_relu(h, ws[0], b)
        return h

    def _sigma(self, h):
        raw = ad.affine(h, self.w_sigma, self.b_sigma)
        sig = ad.softplus(ad.add(raw, np.asarray(-SIGMA_SHIFT, dtype=self.dtype)))
        return ad.reshape(sig, (-1,))

    def forward(self, x_can, d, phi, features=None, beta=None, dirs_encoded=None):
        """Full radiance sample.

        x_can: (N,3) canonical positions (Tensor or ndarray). d: (N,3) unit
        view directions (ndarray), or pass dirs_encoded to reuse a per-ray
        encoding. phi: (N, appear_dim) or (appear_dim,) appearance codes.
        features/beta: required in mode C. Returns (color (N,3) in (0,1),
        sigma (N,) >= 0).
        """
        if dirs_encoded is None:
            d = np.asarray(d, dtype=np.float64)
            norms = np.linalg.norm(d, axis=-1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ParameterError("view directions must be unit-normalized to 1e-6")
            dirs_encoded = encode(_cast(d, self.dtype), self.dir_encoder)
        enc = encode(_cast(x_can, self.dtype), self.pos_encoder)
        h = self._trunk(enc)
        sigma = self._sigma(h)

        segs = [h, dirs_encoded, _row_broadcast(phi, self.dtype)]
        if self.cfg.mode == ConditioningMode.C:
            if features is None or beta is None:
                raise ParameterError("mode C needs deformation features and head parameters")
            segs += [_row_broadcast(beta, self.dtype), features]
        c = ad.affine_multi_relu(segs, self.w_color_in, self.b_color_in)
        color = ad.sigmoid(ad.affine(c, self.w_rgb, self.b_rgb))
        return color, sigma


def _row_broadcast(v, dtype):
    if isinstance(v, Tensor):
        return v if v.data.ndim == 2 else ad.reshape(v, (1, -1))
    v = np.asarray(v, dtype=dtype)
    return v.reshape(1, -1) if v.ndim == 1 else v


def _cast(x, dtype):
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    return x.astype(dtype) if x.dtype != dtype else x


def _he(rng, shape, dtype):
    return Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])).astype(dtype), requires_grad=True)
