"""Dataclass configs for the model, training stages, and ray marching."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    """Latent and field dimensions of the two-layer implicit body model.

    Defaults are desk scale. ``full_scale()`` records the reference
    dimensions used by the original large-model configuration.
    """

    dim_id: int = 64          # identity shape code length
    dim_cloth: int = 32       # clothing shape code length
    dim_tex: int = 32         # texture code length
    dim_feat: int = 16        # point feature emitted by the identity net
    vol_res: int = 8          # feature volume resolution per axis
    vol_channels: int = 8     # feature volume channels
    tau: float = 0.5          # occupancy level set

    def __post_init__(self):
        for name in ("dim_id", "dim_cloth", "dim_tex", "dim_feat", "vol_res", "vol_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0,1)")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        # reference configuration: 4096-d identity code, 512-d clothing and
        # texture codes, 256-d point feature (with 256-wide hidden layers)
        return cls(dim_id=4096, dim_cloth=512, dim_tex=512, dim_feat=256,
                   vol_res=32, vol_channels=32)


@dataclass
class MarchConfig:
    """Ray-march settings for the implicit renderer."""

    n_steps: int = 64
    refine_steps: int = 8          # bisection rounds at the first crossing
    box_half_extent: float = 1.2   # conservative posed-space bound
    bound_margin: float = 0.45     # posed-joint AABB padding (capsule reach)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)

    # network hidden widths (depth fixed at two hidden layers)
    hidden_body: int = 64      # identity occupancy net
    hidden_cloth: int = 64
    hidden_tex: int = 64
    hidden_skin: int = 16      # skinning net sits on the root-finder hot path
    hidden_gen: int = 64       # low-rank bottleneck of the volume generator
    encoder_channels: tuple[int, int, int] = (8, 16, 32)

    # stage 1 (supervised on point scans, autodecoded codes)
    lr_pretrain: float = 1e-3
    batch_samples: int = 8     # scan samples per step
    points_per_sample: int = 512
    pretrain_steps: int = 2000

    # stage 2 (self-supervised on images)
    lr_finetune: float = 1e-4
    ids_per_batch: int = 4     # P of the PK identity sampler
    images_per_id: int = 2     # K of the PK identity sampler
    pixels_per_image: int = 1024
    finetune_steps: int = 600

    triplet_margin: float = 0.3
    loss_weights: dict = field(default_factory=lambda: {
        "id": 1.0, "cloth": 1.0, "tex": 1.0, "cla": 1.0, "skin": 1.0,
        "skin_field": 1.0, "sil": 1.0, "rgb": 1.0, "triplet": 1.0,
    })

    broyden_tol: float = 1e-5
    broyden_max_iter: int = 30
    march: MarchConfig = field(default_factory=MarchConfig)
    train_march_steps: int = 24   # coarser march for sampled training pixels

    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 10

    def __post_init__(self):
        positives = ("lr_pretrain", "lr_finetune", "batch_samples", "points_per_sample",
                     "pretrain_steps", "ids_per_batch", "images_per_id", "pixels_per_image",
                     "finetune_steps", "triplet_margin", "broyden_tol", "broyden_max_iter")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(cfg: TrainConfig) -> dict:
    return _to_jsonable(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    model = ModelConfig(**d.pop("model", {}))
    march_d = d.pop("march", {})
    if "background" in march_d:
        march_d["background"] = tuple(march_d["background"])
    march = MarchConfig(**march_d)
    if "encoder_channels" in d:
        d["encoder_channels"] = tuple(d["encoder_channels"])
    return TrainConfig(model=model, march=march, **d)


def load_config(path) -> TrainConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def save_config(path, cfg: TrainConfig):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
