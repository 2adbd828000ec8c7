"""Dual-path training loop with ADM occlusion, checkpoints and resume."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .adm import NoiseCanvas, adm_step, canvas_gradient, disturbance_loss
from .backbone import BackboneConfig, VisionTransformer, load_checkpoint, save_checkpoint
from .datasets import ImageRecord, PKSampler, records_to_array
from .dpc import (
    AngularHead,
    HolisticHead,
    LossBundle,
    global_triplet,
    id_loss_holistic,
    id_loss_occluded,
    interaction_loss,
    total_loss,
    triplet_loss,
)
from .occlusion import (
    crop_corner_background,
    paste_background,
    patchify_mask,
    random_erase,
    sample_occluder_geometry,
    superimpose,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("adm", "background", "random_erase", "none")
ADM_ORDERS = ("after", "before")


@dataclass
class TrainConfig:
    # input and backbone
    image_height: int = 256
    image_width: int = 128
    patch_size: int = 16
    stride: int = 16
    depth: int = 12
    num_heads: int = 8
    embed_dim: int = 768
    mlp_ratio: float = 4.0
    # batches: P identities x K instances
    ids_per_batch: int = 16
    instances_per_id: int = 4
    # main optimizer: SGD with momentum, cosine decay per epoch, no warmup
    base_lr: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 120
    iters_per_epoch: int = 0  # 0: one pass over the training set
    # losses
    triplet_margin: float = 0.3
    arc_margin: float = 0.3
    arc_scale: float = 30.0
    itr_weight: float = 0.1
    dpc: bool = True
    bnneck: bool = True
    # occlusion
    strategy: str = "adm"
    occlusion_prob: float = 0.5  # single-path arms only; dual path occludes every image
    adm_lr_mult: float = 10.0
    adm_momentum: float = 0.9
    adm_init_std: float = 0.1
    adm_order: str = "after"
    freeze_backbone: bool = False
    # augmentation and normalization
    flip_prob: float = 0.5
    pad: int = 10
    norm_mean: list = field(default_factory=lambda: [0.485, 0.456, 0.406])
    norm_std: list = field(default_factory=lambda: [0.229, 0.224, 0.225])
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.adm_order not in ADM_ORDERS:
            raise ValueError(f"adm_order must be one of {ADM_ORDERS}, got {self.adm_order!r}")
        self.norm_mean = [float(v) for v in self.norm_mean]
        self.norm_std = [float(v) for v in self.norm_std]

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * self.instances_per_id

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            image_height=self.image_height,
            image_width=self.image_width,
            patch_size=self.patch_size,
            stride=self.stride,
            depth=self.depth,
            num_heads=self.num_heads,
            embed_dim=self.embed_dim,
            mlp_ratio=self.mlp_ratio,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


DESK_OVERRIDES = dict(
    image_height=64,
    image_width=32,
    patch_size=8,
    stride=8,
    depth=4,
    num_heads=4,
    embed_dim=64,
    epochs=30,
    iters_per_epoch=20,
    base_lr=0.02,
    pad=3,
)

PROFILES = {"full": {}, "desk": DESK_OVERRIDES}


def make_config(profile: str = "full", **overrides) -> TrainConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[profile], **overrides})


def config_from_dict(data: dict) -> TrainConfig:
    """Build a config from a mapping that must name every field exactly once."""
    names = [f.name for f in dataclasses.fields(TrainConfig)]
    for name in names:
        if name not in data:
            raise KeyError(f"config is missing key {name!r}")
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig(**{name: data[name] for name in names})


def load_config(path: str | Path) -> TrainConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a key-value mapping")
    return config_from_dict(data)


def save_config(config: TrainConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


def kendall_tau(values) -> float:
    from scipy.stats import kendalltau

    return float(kendalltau(np.arange(len(values)), values).statistic)


class Trainer:
    """Owns every piece of mutable training state; drive from one thread."""

    def __init__(self, config: TrainConfig, train_records: list[ImageRecord]):
        self.config = config
        torch.manual_seed(config.seed)
        seeds = np.random.SeedSequence(config.seed).generate_state(3)
        self.rng = np.random.default_rng(int(seeds[0]))

        self.images = torch.from_numpy(records_to_array(train_records))
        expected = (3, config.image_height, config.image_width)
        if tuple(self.images.shape[1:]) != expected:
            raise ValueError(f"training images are {tuple(self.images.shape[1:])}, config expects {expected}")
        self.pids = [r.pid for r in train_records]
        self.pid_list = sorted(set(self.pids))
        label_of = {pid: i for i, pid in enumerate(self.pid_list)}
        self.labels = torch.tensor([label_of[p] for p in self.pids], dtype=torch.long)
        self.num_classes = len(self.pid_list)

        self.model = VisionTransformer(config.backbone())
        self.head_h = HolisticHead(config.embed_dim, self.num_classes)
        self.head_o = AngularHead(config.embed_dim, self.num_classes)
        # batch-norm bottleneck between feature and classifiers; shift frozen at zero
        self.neck = torch.nn.BatchNorm1d(config.embed_dim)
        self.neck.bias.requires_grad_(False)
        self.optimizer = torch.optim.SGD(
            self.network_parameters(),
            lr=config.base_lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        canvas_gen = torch.Generator().manual_seed(int(seeds[1]))
        self.canvas = NoiseCanvas(
            expected,
            lr=config.base_lr * config.adm_lr_mult,
            momentum=config.adm_momentum,
            init_std=config.adm_init_std,
            generator=canvas_gen,
        )
        self.sampler = PKSampler(self.pids, config.ids_per_batch, config.instances_per_id, seed=int(seeds[2]))
        self.mean = torch.tensor(config.norm_mean).view(1, 3, 1, 1)
        self.std = torch.tensor(config.norm_std).view(1, 3, 1, 1)
        self.epoch = 0
        self.iteration = 0

    def network_parameters(self):
        params = [*self.model.parameters(), *self.head_h.parameters(), *self.head_o.parameters()]
        if self.config.bnneck:
            params.append(self.neck.weight)
        return params

    def named_state(self):
        """Every network parameter and buffer, canvas excluded."""
        for prefix, module in (("model", self.model), ("head_h", self.head_h), ("head_o", self.head_o),
                               ("neck", self.neck)):
            for name, tensor in module.state_dict(keep_vars=True).items():
                yield f"{prefix}.{name}", tensor.detach()

    def classifier_input(self, feats: torch.Tensor) -> torch.Tensor:
        return self.neck(feats) if self.config.bnneck else feats

    @property
    def iters_per_epoch(self) -> int:
        if self.config.iters_per_epoch > 0:
            return self.config.iters_per_epoch
        return max(1, math.ceil(len(self.pids) / self.config.batch_size))

    def set_epoch_lr(self, epoch: int) -> float:
        lr = cosine_lr(epoch, self.config.epochs, self.config.base_lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.canvas.lr = lr * self.config.adm_lr_mult
        return lr

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.mean) / self.std

    # -- augmentation and occlusion -----------------------------------------

    def augment(self, images: torch.Tensor) -> torch.Tensor:
        """Random horizontal flip, then zero padding and a random crop back to size."""
        cfg = self.config
        out = images.clone()
        H, W = out.shape[-2:]
        pad = cfg.pad
        padded = F.pad(out, (pad, pad, pad, pad)) if pad else out
        for i in range(out.shape[0]):
            img = padded[i]
            if self.rng.random() < cfg.flip_prob:
                img = img.flip(-1)
            top = int(self.rng.integers(2 * pad + 1))
            left = int(self.rng.integers(2 * pad + 1))
            out[i] = img[:, top:top + H, left:left + W]
        return out

    def occlude(self, holistic: torch.Tensor):
        """Occluded twins before the noise canvas; returns ``(images, pixel_masks, occluded_flags)``."""
        cfg = self.config
        B, _, H, W = holistic.shape
        base = holistic.clone()
        masks = torch.zeros(B, H, W)
        flags = torch.zeros(B, dtype=torch.bool)
        if cfg.strategy == "none":
            return base, masks, flags
        for i in range(B):
            if not cfg.dpc and self.rng.random() >= cfg.occlusion_prob:
                continue
            if cfg.strategy == "random_erase":
                geom = sample_occluder_geometry(H, W, self.rng)
                base[i], masks[i] = random_erase(holistic[i], geom)
            else:
                patch = crop_corner_background(holistic[i], self.rng)
                geom = sample_occluder_geometry(H, W, self.rng)
                base[i], masks[i] = paste_background(holistic[i], patch, geom)
            flags[i] = True
        return base, masks, flags

    def adm_update(self, base: torch.Tensor, masks: torch.Tensor, flags: torch.Tensor) -> float | None:
        """One reversed-gradient canvas step on the disturbance loss; network untouched."""
        if not flags.any():
            return None
        occluded = superimpose(base[flags], masks[flags], self.canvas.values)
        _, trace = self.model(self.normalize(occluded))
        cover = patchify_mask(masks[flags], self.config.patch_size, self.config.stride)
        loss = disturbance_loss(trace, cover)
        adm_step(self.canvas, canvas_gradient(loss, self.canvas))
        return float(loss.detach())

    # -- one iteration ---------------------------------------------------------

    def compute_losses(self, holistic: torch.Tensor, occluded: torch.Tensor, labels: torch.Tensor) -> LossBundle:
        cfg = self.config
        zero = torch.zeros(())
        if not cfg.dpc:
            # single path on the (partially) occluded batch: softmax ID + triplet
            feats, _ = self.model(self.normalize(occluded))
            return total_loss(
                id_loss_holistic(self.classifier_input(feats), labels, self.head_h.weight),
                triplet_loss(F.normalize(feats, dim=1), labels, cfg.triplet_margin),
                zero, zero, zero, zero, cfg.itr_weight,
            )
        # both paths through the same parameters in one pass
        feats, _ = self.model(self.normalize(torch.cat([holistic, occluded])))
        x_h, x_o = feats.split(holistic.shape[0])
        c_h, c_o = self.classifier_input(feats).split(holistic.shape[0])
        # metric losses see unit-norm features, the geometry used at retrieval time
        m_h, m_o = F.normalize(x_h, dim=1), F.normalize(x_o, dim=1)
        cloned_w_h = self.head_h.weight.detach().clone()
        return total_loss(
            id_loss_holistic(c_h, labels, self.head_h.weight),
            triplet_loss(m_h, labels, cfg.triplet_margin),
            id_loss_occluded(c_o, labels, self.head_o.weight, cfg.arc_margin, cfg.arc_scale),
            triplet_loss(m_o, labels, cfg.triplet_margin),
            global_triplet(m_h, m_o, labels, cfg.triplet_margin),
            interaction_loss(c_o, labels, cloned_w_h),
            cfg.itr_weight,
        )

    def train_step(self, indices) -> tuple[LossBundle, float | None]:
        cfg = self.config
        indices = torch.as_tensor(list(indices), dtype=torch.long)
        labels = self.labels[indices]
        holistic = self.augment(self.images[indices])
        base, masks, flags = self.occlude(holistic)

        adm_value = None
        use_adm = cfg.strategy == "adm"
        if use_adm and cfg.adm_order == "before":
            adm_value = self.adm_update(base, masks, flags)
        occluded = superimpose(base, masks, self.canvas.values.detach()) if use_adm else base

        self.model.train()
        bundle = self.compute_losses(holistic, occluded, labels)
        self.optimizer.zero_grad(set_to_none=True)
        bundle.total.backward()
        if not cfg.freeze_backbone:
            self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)

        if use_adm and cfg.adm_order == "after":
            adm_value = self.adm_update(base, masks, flags)
        self.iteration += 1
        return bundle, adm_value

    # -- state -------------------------------------------------------------------

    def state(self) -> tuple[dict, dict]:
        tensors = {
            "backbone": self.model.state_dict(),
            "head_h": self.head_h.state_dict(),
            "head_o": self.head_o.state_dict(),
            "neck": self.neck.state_dict(),
            "canvas": {"values": self.canvas.values.detach().clone()},
        }
        extra = {
            "epoch": self.epoch,
            "iteration": self.iteration,
            "optimizer": self.optimizer.state_dict(),
            "canvas_optimizer": self.canvas.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "sampler": self.sampler.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "pid_list": self.pid_list,
        }
        return tensors, extra

    def load_state(self, payload: dict) -> None:
        tensors, extra = payload["tensors"], payload["extra"]
        if extra["pid_list"] != self.pid_list:
            raise ValueError("checkpoint was trained on a different identity set")
        self.model.load_state_dict(tensors["backbone"])
        self.head_h.load_state_dict(tensors["head_h"])
        self.head_o.load_state_dict(tensors["head_o"])
        self.neck.load_state_dict(tensors["neck"])
        self.canvas.load_state_dict({"values": tensors["canvas"]["values"], "optimizer": extra["canvas_optimizer"]})
        self.optimizer.load_state_dict(extra["optimizer"])
        self.rng.bit_generator.state = extra["rng"]
        self.sampler.load_state_dict(extra["sampler"])
        torch.set_rng_state(extra["torch_rng"])
        self.epoch = extra["epoch"]
        self.iteration = extra["iteration"]

    def save(self, path: str | Path) -> None:
        tensors, extra = self.state()
        save_checkpoint(path, self.config.to_dict(), tensors, extra)


def model_from_checkpoint(payload: dict) -> tuple[VisionTransformer, TrainConfig]:
    config = config_from_dict(payload["config"])
    model = VisionTransformer(config.backbone())
    model.load_state_dict(payload["tensors"]["backbone"])
    model.eval()
    return model, config


def metrics_record(epoch: int, iteration: int, lr: float, bundle: LossBundle, adm_value) -> dict:
    record = {"epoch": epoch, "iteration": iteration, "lr": lr}
    record.update(bundle.as_floats())
    record["adm"] = adm_value
    return record


def _truncate_log(path: Path, last_iteration: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines() if line and json.loads(line)["iteration"] <= last_iteration]
    path.write_text("".join(line + "\n" for line in kept))


def fit(config: TrainConfig, train_records: list[ImageRecord], out_dir: str | Path,
        resume: str | Path | None = None, stop_after_epoch: int | None = None) -> Path:
    """Train for ``config.epochs`` epochs, checkpointing after every epoch.

    Writes ``metrics.jsonl`` and ``checkpoints/epoch_XXX.pt`` (plus ``last.pt``)
    under ``out_dir`` and returns the path of the last checkpoint.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    log_path = out_dir / "metrics.jsonl"
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create run directory {ckpt_dir}: {exc.strerror or exc}") from exc

    trainer = Trainer(config, train_records)
    if resume is not None:
        trainer.load_state(load_checkpoint(resume))
        _truncate_log(log_path, trainer.iteration)
    elif log_path.exists():
        log_path.unlink()

    last = ckpt_dir / "last.pt"
    final_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    try:
        with open(log_path, "a") as log:
            for epoch in range(trainer.epoch, final_epoch):
                lr = trainer.set_epoch_lr(epoch)
                for _ in range(trainer.iters_per_epoch):
                    plan = trainer.sampler.next_batch()
                    bundle, adm_value = trainer.train_step(plan.indices)
                    log.write(json.dumps(metrics_record(epoch, trainer.iteration, lr, bundle, adm_value)) + "\n")
                log.flush()
                trainer.epoch = epoch + 1
                path = ckpt_dir / f"epoch_{epoch + 1:03d}.pt"
                trainer.save(path)
                shutil.copyfile(path, last)
                logger.info("epoch %d/%d lr=%.2e loss=%.4f", epoch + 1, config.epochs, lr, float(bundle.total.detach()))
    except OSError as exc:
        raise OSError(f"training I/O failed at {exc.filename or out_dir}: {exc.strerror or exc}") from exc
    return last
