"""Joint two-layer implicit body model in canonical space.

Three fields share one canonical frame ([-1,1]^3): an identity occupancy
net that also emits a point feature, a clothed occupancy net conditioned
on that feature, and a texture field. The identity code never reaches
the occupancy net directly; it is decoded by a low-rank generator into a
feature volume which is trilinearly sampled at the query point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .config import ModelConfig
from .nn import Mlp
from .tape import Tensor


@dataclass
class LatentCodes:
    """Per-subject disentangled codes (identity, clothing shape, texture)."""

    z_id: np.ndarray
    z_cloth: np.ndarray
    z_tex: np.ndarray

    def validate(self, cfg: ModelConfig):
        if self.z_id.shape != (cfg.dim_id,):
            raise ValueError(f"z_id has shape {self.z_id.shape}, want ({cfg.dim_id},)")
        if self.z_cloth.shape != (cfg.dim_cloth,):
            raise ValueError(f"z_cloth has shape {self.z_cloth.shape}, want ({cfg.dim_cloth},)")
        if self.z_tex.shape != (cfg.dim_tex,):
            raise ValueError(f"z_tex has shape {self.z_tex.shape}, want ({cfg.dim_tex},)")
        for arr in (self.z_id, self.z_cloth, self.z_tex):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite latent code")


class ImplicitBodyModel:
    """Networks of the two-layer model plus the feature-volume generator.

    body_net : (vol feature ++ x) -> (occupancy logit, point feature)
    cloth_net: (z_cloth ++ feature ++ x) -> clothed occupancy
    tex_net  : (z_tex ++ z_cloth ++ x) -> rgb
    generator: z_id -> feature volume grid, low-rank (z_id -> h -> grid)
    """

    def __init__(self, cfg: ModelConfig, hidden_body: int = 64, hidden_cloth: int = 64,
                 hidden_tex: int = 64, hidden_gen: int = 64,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        r3c = cfg.vol_res ** 3 * cfg.vol_channels
        self.body_net = Mlp([cfg.vol_channels + 3, hidden_body, hidden_body, 1 + cfg.dim_feat],
                            hidden_act="softplus", out_act="none", rng=rng)
        self.cloth_net = Mlp([cfg.dim_cloth + cfg.dim_feat + 3, hidden_cloth, hidden_cloth, 1],
                             hidden_act="softplus", out_act="sigmoid", rng=rng)
        self.tex_net = Mlp([cfg.dim_tex + cfg.dim_cloth + 3, hidden_tex, hidden_tex, 3],
                           hidden_act="softplus", out_act="sigmoid", rng=rng)
        self.generator = Mlp([cfg.dim_id, hidden_gen, r3c], hidden_act="none",
                             out_act="none", rng=rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, net in (("body", self.body_net), ("cloth", self.cloth_net),
                            ("tex", self.tex_net), ("gen", self.generator)):
            for name, p in net.parameters():
                out[f"{prefix}/{name}"] = p
        return out

    def set_trainable(self, flag: bool):
        for net in (self.body_net, self.cloth_net, self.tex_net, self.generator):
            net.set_trainable(flag)

    # -- feature volume -----------------------------------------------------

    def generate_volume(self, z_id: Tensor) -> Tensor:
        if z_id.shape[-1] != self.cfg.dim_id:
            raise ValueError(f"z_id dim {z_id.shape[-1]} != {self.cfg.dim_id}")
        flat = self.generator.forward(tape.reshape(z_id, (1, self.cfg.dim_id)))
        r, c = self.cfg.vol_res, self.cfg.vol_channels
        return tape.reshape(flat, (r, r, r, c))

    def generate_volume_np(self, z_id: np.ndarray) -> np.ndarray:
        if z_id.shape[-1] != self.cfg.dim_id:
            raise ValueError(f"z_id dim {z_id.shape[-1]} != {self.cfg.dim_id}")
        flat = self.generator.forward_np(z_id.reshape(1, -1))
        r, c = self.cfg.vol_res, self.cfg.vol_channels
        return flat.reshape(r, r, r, c)

    # -- taped queries (x: [N,3]) --------------------------------------------

    def query_identity(self, z_id: Tensor, x: Tensor, volume: Tensor | None = None):
        """Identity occupancy o1 in (0,1) and point feature at canonical x."""
        if volume is None:
            volume = self.generate_volume(z_id)
        feat = tape.trilinear(volume, x)
        h = self.body_net.forward(tape.concat([feat, x], axis=-1))
        o1 = tape.sigmoid(tape.slice_cols(h, 0, 1))
        f = tape.slice_cols(h, 1, 1 + self.cfg.dim_feat)
        return o1, f

    def query_clothed(self, z_cloth: Tensor, f: Tensor, x: Tensor) -> Tensor:
        n = x.shape[0]
        zc = tape.repeat_rows(z_cloth, n)
        return self.cloth_net.forward(tape.concat([zc, f, x], axis=-1))

    def query_texture(self, z_tex: Tensor, z_cloth: Tensor, x: Tensor) -> Tensor:
        n = x.shape[0]
        zt = tape.repeat_rows(z_tex, n)
        zc = tape.repeat_rows(z_cloth, n)
        return self.tex_net.forward(tape.concat([zt, zc, x], axis=-1))

    # -- untaped fast paths ---------------------------------------------------

    def query_identity_np(self, volume: np.ndarray, x: np.ndarray):
        feat = tape.trilinear_np(volume, x)
        h = self.body_net.forward_np(np.concatenate([feat, x.astype(np.float32)], axis=-1))
        return tape.sigmoid_np(h[:, 0]), h[:, 1:1 + self.cfg.dim_feat]

    def query_clothed_np(self, z_cloth: np.ndarray, f: np.ndarray, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        zc = np.broadcast_to(z_cloth.reshape(1, -1), (n, z_cloth.size))
        inp = np.concatenate([zc, f, x.astype(np.float32)], axis=-1)
        return self.cloth_net.forward_np(inp)[:, 0]

    def query_texture_np(self, z_tex: np.ndarray, z_cloth: np.ndarray, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        zt = np.broadcast_to(z_tex.reshape(1, -1), (n, z_tex.size))
        zc = np.broadcast_to(z_cloth.reshape(1, -1), (n, z_cloth.size))
        return self.tex_net.forward_np(np.concatenate([zt, zc, x.astype(np.float32)], axis=-1))

    def clothed_occupancy_np(self, codes: LatentCodes, x: np.ndarray,
                             volume: np.ndarray | None = None) -> np.ndarray:
        """o2 at canonical x for fixed codes (volume may be precomputed)."""
        if volume is None:
            volume = self.generate_volume_np(codes.z_id)
        _, f = self.query_identity_np(volume, x)
        return self.query_clothed_np(codes.z_cloth, f, x)


# module-level aliases matching the operation names used elsewhere

def generate_volume(model: ImplicitBodyModel, z_id: Tensor) -> Tensor:
    return model.generate_volume(z_id)


def query_identity(model: ImplicitBodyModel, z_id: Tensor, x: Tensor):
    return model.query_identity(z_id, x)


def query_clothed(model: ImplicitBodyModel, z_cloth: Tensor, f: Tensor, x: Tensor) -> Tensor:
    return model.query_clothed(z_cloth, f, x)


def query_texture(model: ImplicitBodyModel, z_tex: Tensor, z_cloth: Tensor, x: Tensor) -> Tensor:
    return model.query_texture(z_tex, z_cloth, x)
