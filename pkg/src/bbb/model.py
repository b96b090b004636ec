"""Multi-task transformer for joint re-identification and damage detection.

Shared ViT-style encoder with overlapping patch embedding and side-information
embedding, plus three task branches (global ReID, jigsaw local ReID, damage),
each owning its dedicated final transformer layer.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1

DAMAGE_HEAD_ORDER = ("bent", "broken", "front_wheel", "rear_wheel", "seat",
                     "handlebar", "pedals")

SYNTH_TASKS = frozenset({"global_reid", "jigsaw", "damage"})
REAL_TASKS = frozenset({"damage"})


class ShapeConfigError(ValueError):
    """Raised when image/patch/stride or grouping arithmetic does not divide."""


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    patch_stride: int = 8
    embed_dim: int = 192
    depth: int = 4
    num_heads: int = 3
    k_groups: int = 4
    num_ids: int = 1
    num_parts: int = 5
    num_cameras: int = 2
    num_models: int = 20
    mlp_ratio: float = 4.0
    inference_shuffle_seed: int = 12345

    def validate(self):
        if (self.image_size - self.patch_size) % self.patch_stride != 0:
            raise ShapeConfigError(
                f"(image_size - patch_size) = {self.image_size - self.patch_size} "
                f"not divisible by stride {self.patch_stride}")
        if self.embed_dim % self.num_heads != 0:
            raise ShapeConfigError("embed_dim must divide by num_heads")
        if self.num_tokens % self.k_groups != 0:
            raise ShapeConfigError(
                f"k_groups={self.k_groups} does not divide token count {self.num_tokens}")
        if self.depth < 2:
            raise ShapeConfigError("depth must be >= 2 (shared layers + branch layer)")

    @property
    def grid_size(self) -> int:
        return (self.image_size - self.patch_size) // self.patch_stride + 1

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2


def desk_config(**overrides) -> ModelConfig:
    """Small CPU-trainable preset: 64px, patch 8 stride 8 -> 64 patch tokens."""
    return ModelConfig(**overrides)


def paper_config(**overrides) -> ModelConfig:
    """Full-scale preset: 256px, patch 16 stride 12 -> 441 patch tokens."""
    kw = dict(image_size=256, patch_size=16, patch_stride=12, embed_dim=768,
              depth=12, num_heads=12)
    kw.update(overrides)
    return ModelConfig(**kw)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    """Overlapping patch projection via strided convolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Conv2d(3, cfg.embed_dim, kernel_size=cfg.patch_size,
                              stride=cfg.patch_stride)

    def forward(self, x):
        x = self.proj(x)  # B, d, g, g
        return x.flatten(2).transpose(1, 2)  # B, N, d


def _bn_neck(dim):
    bn = nn.BatchNorm1d(dim)
    bn.bias.requires_grad_(False)  # BNNeck: frozen shift
    return bn


class TransReI3D(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens + 1, d))
        self.sie_embed = nn.Parameter(torch.zeros(cfg.num_cameras, 1, d))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.sie_embed, std=0.02)

        self.shared = nn.ModuleList(
            [Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth - 1)])

        # global ReID branch
        self.global_layer = Block(d, cfg.num_heads, cfg.mlp_ratio)
        self.global_norm = nn.LayerNorm(d)
        self.global_bn = _bn_neck(d)
        self.global_fc = nn.Linear(d, cfg.num_ids, bias=False)

        # jigsaw branch: one shared dedicated layer, per-group BN + FC
        self.jigsaw_layer = Block(d, cfg.num_heads, cfg.mlp_ratio)
        self.jigsaw_norm = nn.LayerNorm(d)
        self.jigsaw_bns = nn.ModuleList([_bn_neck(d) for _ in range(cfg.k_groups)])
        self.jigsaw_fcs = nn.ModuleList(
            [nn.Linear(d, cfg.num_ids, bias=False) for _ in range(cfg.k_groups)])

        # damage branch: 7 independent BN -> FC(1) heads
        self.damage_layer = Block(d, cfg.num_heads, cfg.mlp_ratio)
        self.damage_norm = nn.LayerNorm(d)
        self.damage_bns = nn.ModuleList([_bn_neck(d) for _ in DAMAGE_HEAD_ORDER])
        self.damage_fcs = nn.ModuleList(
            [nn.Linear(d, 1) for _ in DAMAGE_HEAD_ORDER])

        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_out")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in")
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    # --- stages -----------------------------------------------------------
    def patchify_embed(self, images: torch.Tensor,
                       camera_index: torch.Tensor) -> torch.Tensor:
        """Patch projection + positional + side-information embedding, with a
        classification token prepended. Output: [B, N+1, d]."""
        if camera_index.max().item() >= self.cfg.num_cameras:
            raise ShapeConfigError("camera index outside SIE vocabulary")
        tokens = self.patch_embed(images)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1) + self.pos_embed
        x = x + self.sie_embed[camera_index]
        return x

    def forward_shared(self, tokens: torch.Tensor) -> torch.Tensor:
        for blk in self.shared:
            tokens = blk(tokens)
        return tokens

    def forward_global(self, encoded: torch.Tensor):
        x = self.global_norm(self.global_layer(encoded))
        f_g = self.global_bn(x[:, 0])
        return f_g, self.global_fc(f_g)

    def jigsaw_permutation(self, shuffle_seed: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(shuffle_seed)
        return torch.randperm(self.cfg.num_tokens, generator=g)

    def forward_jigsaw(self, encoded: torch.Tensor, shuffle_seed: int):
        """Seeded patch shuffle into k equal groups, each re-encoded with the
        (shared) dedicated layer together with a copy of the cls token."""
        cfg = self.cfg
        cls = encoded[:, :1]
        patches = encoded[:, 1:]
        perm = self.jigsaw_permutation(shuffle_seed).to(encoded.device)
        patches = patches[:, perm]
        group_size = cfg.num_tokens // cfg.k_groups
        f_l, logits = [], []
        for j in range(cfg.k_groups):
            group = patches[:, j * group_size:(j + 1) * group_size]
            x = torch.cat([cls, group], dim=1)
            x = self.jigsaw_norm(self.jigsaw_layer(x))
            f = self.jigsaw_bns[j](x[:, 0])
            f_l.append(f)
            logits.append(self.jigsaw_fcs[j](f))
        return f_l, logits

    def forward_damage(self, encoded: torch.Tensor) -> torch.Tensor:
        x = self.damage_norm(self.damage_layer(encoded))
        cls = x[:, 0]
        logits = [fc(bn(cls)) for bn, fc in zip(self.damage_bns, self.damage_fcs)]
        return torch.cat(logits, dim=1)  # [B, 7]

    def backbone_cls(self, encoded: torch.Tensor) -> torch.Tensor:
        return encoded[:, 0]

    def damage_branch_cls(self, encoded: torch.Tensor) -> torch.Tensor:
        return self.damage_norm(self.damage_layer(encoded))[:, 0]

    # --- full passes ------------------------------------------------------
    def forward(self, images, camera_index, shuffle_seed: int | None = None,
                tasks: frozenset = SYNTH_TASKS):
        if shuffle_seed is None:
            shuffle_seed = self.cfg.inference_shuffle_seed
        tokens = self.patchify_embed(images, camera_index)
        encoded = self.forward_shared(tokens)
        out = {"encoded": encoded, "backbone_cls": self.backbone_cls(encoded)}
        if "global_reid" in tasks:
            out["f_g"], out["id_logits_global"] = self.forward_global(encoded)
        if "jigsaw" in tasks:
            out["f_l"], out["id_logits_local"] = self.forward_jigsaw(encoded, shuffle_seed)
        if "damage" in tasks:
            out["damage_logits"] = self.forward_damage(encoded)
        return out

    @torch.no_grad()
    def inference_embedding(self, images, camera_index,
                            use_local: bool = True) -> torch.Tensor:
        """L2-normalized retrieval embedding: concat(f_g, f_l^1..k) by default."""
        tokens = self.patchify_embed(images, camera_index)
        encoded = self.forward_shared(tokens)
        f_g, _ = self.forward_global(encoded)
        feats = [f_g]
        if use_local:
            f_l, _ = self.forward_jigsaw(encoded, self.cfg.inference_shuffle_seed)
            feats.extend(f_l)
        e = torch.cat(feats, dim=1)
        return F.normalize(e, dim=1)


def route_batch(domains: list[str]) -> frozenset:
    """Task set for a homogeneous-domain batch."""
    kinds = set(domains)
    if not kinds:
        return frozenset()
    if len(kinds) > 1:
        raise ValueError(f"mixed-domain batch: {sorted(kinds)}")
    return SYNTH_TASKS if kinds.pop() == "synthetic" else REAL_TASKS


def save_checkpoint(path: str, model: TransReI3D, normalization=None,
                    extra: dict | None = None):
    mean, std = normalization if normalization is not None else (None, None)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "normalization_mean": None if mean is None else list(map(float, mean)),
        "normalization_std": None if std is None else list(map(float, std)),
        "inference_shuffle_seed": model.cfg.inference_shuffle_seed,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[TransReI3D, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    cfg = ModelConfig(**payload["model_config"])
    model = TransReI3D(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
