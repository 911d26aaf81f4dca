"""Small image encoder emitting the three latent codes.

Three stride-2 stages (2x2 patch average followed by a per-pixel dense
channel mix) take a 128x64x3 image down to 16x8, then one linear head
per code reads the flattened features. Heads start near zero so an
untrained encoder decodes to the mean body.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .config import ModelConfig
from .nn import Mlp
from .tape import Tensor


class ImageEncoder:
    def __init__(self, cfg: ModelConfig, channels: tuple[int, int, int] = (8, 16, 32),
                 height: int = 128, width: int = 64,
                 rng: np.random.Generator | None = None, head_scale: float = 0.1):
        if height % 8 or width % 8:
            raise ValueError("image sides must be divisible by 8")
        self.cfg = cfg
        self.height = height
        self.width = width
        self.channels = tuple(channels)
        c1, c2, c3 = channels
        self.mixes = [
            Mlp([3, c1], hidden_act="relu", out_act="none", rng=rng),
            Mlp([c1, c2], hidden_act="relu", out_act="none", rng=rng),
            Mlp([c2, c3], hidden_act="relu", out_act="none", rng=rng),
        ]
        flat = (height // 8) * (width // 8) * c3
        self.heads = {
            "id": Mlp([flat, cfg.dim_id], out_act="none", rng=rng),
            "cloth": Mlp([flat, cfg.dim_cloth], out_act="none", rng=rng),
            "tex": Mlp([flat, cfg.dim_tex], out_act="none", rng=rng),
        }
        for head in self.heads.values():
            head.weights[0].data *= head_scale

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, mix in enumerate(self.mixes):
            for name, p in mix.parameters():
                out[f"mix{i}/{name}"] = p
        for key, head in self.heads.items():
            for name, p in head.parameters():
                out[f"head_{key}/{name}"] = p
        return out

    def set_trainable(self, flag: bool):
        for mix in self.mixes:
            mix.set_trainable(flag)
        for head in self.heads.values():
            head.set_trainable(flag)

    def _backbone(self, img: Tensor) -> Tensor:
        h, w = self.height, self.width
        x = img
        ch = 3
        for mix in self.mixes:
            x = tape.avg_pool2(x)
            h, w = h // 2, w // 2
            x = tape.reshape(x, (h * w, ch))
            x = tape.relu(mix.forward(x))
            ch = mix.out_dim
            x = tape.reshape(x, (h, w, ch))
        return tape.reshape(x, (1, h * w * ch))

    def forward(self, img: Tensor):
        """Image [H,W,3] -> (z_id, z_cloth, z_tex), each a flat tensor."""
        if img.shape != (self.height, self.width, 3):
            raise ValueError(f"image shape {img.shape}, want ({self.height},{self.width},3)")
        flat = self._backbone(img)
        z_id = tape.reshape(self.heads["id"].forward(flat), (self.cfg.dim_id,))
        z_cloth = tape.reshape(self.heads["cloth"].forward(flat), (self.cfg.dim_cloth,))
        z_tex = tape.reshape(self.heads["tex"].forward(flat), (self.cfg.dim_tex,))
        return z_id, z_cloth, z_tex

    def forward_np(self, img: np.ndarray):
        """Untaped forward for feature extraction."""
        with tape.no_grad():
            z_id, z_cloth, z_tex = self.forward(Tensor(np.asarray(img, dtype=np.float32)))
        return z_id.data.copy(), z_cloth.data.copy(), z_tex.data.copy()
