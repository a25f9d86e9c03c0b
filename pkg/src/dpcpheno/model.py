"""Hybrid CNN/ViT multi-task network for 4-channel DPC cell images."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .tensorcore import DimensionError, NumericalError, Rng, Tensor, derive_seed
from .tensorcore import functional as F

VARIANTS = ("full", "cnn_only", "vit_only", "no_gating", "cls_only", "reg_only")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    image_hw: int = 28
    cnn_stem_out: int = 64
    cnn_token_dim: int = 192
    cnn_tokens: int = 196
    vit_patch: int = 4
    vit_dim: int = 128
    vit_blocks: int = 2
    vit_heads: int = 4
    vit_mlp_ratio: int = 4
    fused_dim: int = 256
    n_classes: int = 3
    n_markers: int = 4
    head_dropout: float = 0.4
    refine_dropout: float = 0.2
    inception_modules: int = 2
    inception_split: tuple[int, int, int] = (24, 24, 16)
    # ablation switches
    fusion: str = "learned"  # learned | cnn_only | vit_only
    gating: bool = True
    tasks: str = "both"  # both | cls | reg

    def __post_init__(self):
        if self.cnn_tokens != (self.image_hw // 2) ** 2:
            raise ValueError(f"cnn_tokens must be (image_hw/2)^2 = {(self.image_hw // 2) ** 2}")
        if self.image_hw % self.vit_patch:
            raise ValueError("image_hw must be divisible by vit_patch")
        if self.vit_dim % self.vit_heads:
            raise ValueError("vit_dim must be divisible by vit_heads")
        if sum(self.inception_split) != self.cnn_stem_out:
            raise ValueError("inception_split must sum to cnn_stem_out")
        if self.fusion not in ("learned", "cnn_only", "vit_only"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.tasks not in ("both", "cls", "reg"):
            raise ValueError(f"unknown task set {self.tasks!r}")

    @property
    def vit_patches(self) -> int:
        return (self.image_hw // self.vit_patch) ** 2

    @property
    def use_cnn(self) -> bool:
        return self.fusion != "vit_only"

    @property
    def use_vit(self) -> bool:
        return self.fusion != "cnn_only"

    def for_variant(self, variant: str) -> "ModelConfig":
        base = replace(self, fusion="learned", gating=True, tasks="both")
        if variant == "full":
            return base
        if variant == "cnn_only":
            return replace(base, fusion="cnn_only")
        if variant == "vit_only":
            return replace(base, fusion="vit_only")
        if variant == "no_gating":
            return replace(base, gating=False)
        if variant == "cls_only":
            return replace(base, tasks="cls")
        if variant == "reg_only":
            return replace(base, tasks="reg")
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inception_split"] = list(self.inception_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "inception_split" in d:
            d["inception_split"] = tuple(d["inception_split"])
        return cls(**d)


@dataclass
class Predictions:
    cls_probs: Tensor | None
    reg_values: Tensor | None
    features: dict[str, Tensor] = field(default_factory=dict)
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)


class ECA(nn.Module):
    """Channel gating: pooled descriptor -> 1-D conv over channels -> sigmoid."""

    def __init__(self, channels: int, rng: Rng, k: int = 3, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.k = k
        self.weight = Tensor((rng.normal(0.0, 1.0, k) / np.sqrt(k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def gates(self, x: Tensor) -> Tensor:
        B, C = x.shape[:2]
        desc = F.global_avg_pool(x)
        pad = self.k // 2
        zeros = np.zeros((B, pad), dtype=x.dtype)
        padded = F.concat([zeros, desc, zeros], axis=1)
        acc = None
        for j in range(self.k):
            term = padded[:, j:j + C] * self.weight[j:j + 1]
            acc = term if acc is None else acc + term
        return F.sigmoid(acc + self.bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"eca: input axis 1 (channels) = {x.shape[1]}, expected {self.channels}")
        g = self.gates(x)
        return x * g.reshape(x.shape[0], self.channels, 1, 1)


class InceptionResidual(nn.Module):
    """1x1, 3x3 and cascaded 3x3 branches concatenated and added to the input."""

    def __init__(self, channels: int, split: tuple[int, int, int], rng: Rng, dtype=np.float32):
        super().__init__()
        a, b, c = split
        self.b1 = nn.ConvBNAct(channels, a, 1, rng, dtype=dtype)
        self.b3 = nn.ConvBNAct(channels, b, 3, rng, dtype=dtype)
        self.b33a = nn.ConvBNAct(channels, c, 3, rng, dtype=dtype)
        self.b33b = nn.ConvBNAct(c, c, 3, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        branches = F.concat([self.b1(x), self.b3(x), self.b33b(self.b33a(x))], axis=1)
        return x + branches

    def convs(self) -> list[nn.Conv2d]:
        return [self.b1.conv, self.b3.conv, self.b33a.conv, self.b33b.conv]


class CNNBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: Rng, dtype=np.float32):
        super().__init__()
        self.stem = nn.ConvBNAct(cfg.in_channels, cfg.cnn_stem_out, 3, rng, dtype=dtype)
        self.inception = [InceptionResidual(cfg.cnn_stem_out, cfg.inception_split, rng, dtype=dtype)
                          for _ in range(cfg.inception_modules)]
        self.reduce = nn.ConvBNAct(cfg.cnn_stem_out, cfg.cnn_token_dim, 3, rng, stride=2, dtype=dtype)

    def forward(self, x: Tensor, check=None) -> Tensor:
        h = self.stem(x)
        _check(check, "cnn.stem", h)
        for i, block in enumerate(self.inception):
            h = block(h)
            _check(check, f"cnn.inception.{i}", h)
        h = self.reduce(h)
        _check(check, "cnn.reduce", h)
        B, C, H, W = h.shape
        return F.transpose(F.reshape(h, (B, C, H * W)), (0, 2, 1))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, rng: Rng, dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = nn.Linear(dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        h = self.heads
        qkv = F.transpose(F.reshape(self.qkv(x), (B, T, 3, h, D // h)), (2, 0, 3, 1, 4))
        out = F.attention(qkv[0], qkv[1], qkv[2])
        out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (B, T, D))
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: Rng, dtype=np.float32):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, heads, rng, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim, rng, dtype=dtype)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ViTBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: Rng, dtype=np.float32):
        super().__init__()
        self.patch = cfg.vit_patch
        patch_dim = cfg.in_channels * cfg.vit_patch ** 2
        self.embed = nn.Linear(patch_dim, cfg.vit_dim, rng, dtype=dtype)
        self.embed.weight.value = (rng.normal(0.0, 0.02, self.embed.weight.shape)).astype(dtype)
        self.cls_token = Tensor(rng.normal(0.0, 0.02, (1, 1, cfg.vit_dim)).astype(dtype), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.02, (1, cfg.vit_patches + 1, cfg.vit_dim)).astype(dtype),
                          requires_grad=True)
        self.blocks = [TransformerBlock(cfg.vit_dim, cfg.vit_heads, cfg.vit_mlp_ratio, rng, dtype=dtype)
                       for _ in range(cfg.vit_blocks)]
        self.norm = nn.LayerNorm(cfg.vit_dim, dtype=dtype)

    def patchify(self, x: Tensor) -> Tensor:
        """[B, C, H, W] -> [B, n_patches, C*p*p], patches in row-major grid order."""
        B, C, H, W = x.shape
        p = self.patch
        t = F.reshape(x, (B, C, H // p, p, W // p, p))
        t = F.transpose(t, (0, 2, 4, 1, 3, 5))
        return F.reshape(t, (B, (H // p) * (W // p), C * p * p))

    def forward(self, x: Tensor, check=None) -> Tensor:
        tokens = self.embed(self.patchify(x))
        B = x.shape[0]
        cls = F.mul(np.ones((B, 1, 1), dtype=tokens.dtype), self.cls_token)
        h = F.concat([cls, tokens], axis=1) + self.pos
        for i, block in enumerate(self.blocks):
            h = block(h)
            _check(check, f"vit.blocks.{i}", h)
        return self.norm(h)


class Fusion(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: Rng, dtype=np.float32):
        super().__init__()
        self.mode = cfg.fusion
        if cfg.use_cnn:
            self.cnn_proj = nn.Linear(cfg.cnn_token_dim, cfg.fused_dim, rng, dtype=dtype)
        if cfg.use_vit:
            self.vit_proj = nn.Linear(cfg.vit_dim, cfg.fused_dim, rng, dtype=dtype)
        if self.mode == "learned":
            self.alpha = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)
        self.norm = nn.LayerNorm(cfg.fused_dim, dtype=dtype)

    def weights(self) -> Tensor:
        return F.softmax(self.alpha, axis=0)

    def forward(self, f_cnn: Tensor | None, f_vit: Tensor | None) -> tuple[Tensor, np.ndarray]:
        if self.mode == "cnn_only":
            return self.norm(self.cnn_proj(F.mean(f_cnn, axis=1))), np.array([1.0, 0.0])
        if self.mode == "vit_only":
            return self.norm(self.vit_proj(f_vit[:, 0, :])), np.array([0.0, 1.0])
        h_cnn = self.cnn_proj(F.mean(f_cnn, axis=1))
        h_vit = self.vit_proj(f_vit[:, 0, :])
        w = self.weights()
        mixed = h_cnn * w[0:1] + h_vit * w[1:2]
        return self.norm(mixed), w.value.astype(np.float64)


class Refinement(nn.Module):
    """h + Linear(Dropout(GELU(LayerNorm(Linear(h)))))."""

    def __init__(self, dim: int, p: float, rng: Rng, dropout_rng: Rng, dtype=np.float32):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim, rng, dtype=dtype)
        self.norm = nn.LayerNorm(dim, dtype=dtype)
        self.drop = nn.Dropout(p, dropout_rng)
        self.fc2 = nn.Linear(dim, dim, rng, dtype=dtype)

    def forward(self, h: Tensor) -> Tensor:
        return h + self.fc2(self.drop(F.gelu(self.norm(self.fc1(h)))))


class TaskGate(nn.Module):
    """Sigmoid gate between a task feature and a learned mix of both tasks."""

    def __init__(self, dim: int, rng: Rng, dtype=np.float32):
        super().__init__()
        self.gate = nn.Linear(2 * dim, dim, rng, dtype=dtype)
        self.mix = nn.Linear(2 * dim, dim, rng, dtype=dtype)
        self.norm = nn.LayerNorm(dim, dtype=dtype)

    def forward(self, h_task: Tensor, joint: Tensor) -> tuple[Tensor, Tensor]:
        g = F.sigmoid(self.gate(joint))
        m = self.mix(joint)
        pre = h_task * g + m * (1.0 - g)
        return self.norm(pre), g


class Head(nn.Module):
    """dim -> 128 -> 64 -> out with LayerNorm + GELU + Dropout at the hidden stages."""

    def __init__(self, dim: int, out: int, p: float, rng: Rng, dropout_rng: Rng, dtype=np.float32):
        super().__init__()
        self.fc1 = nn.Linear(dim, 128, rng, dtype=dtype)
        self.norm1 = nn.LayerNorm(128, dtype=dtype)
        self.drop1 = nn.Dropout(p, dropout_rng)
        self.fc2 = nn.Linear(128, 64, rng, dtype=dtype)
        self.norm2 = nn.LayerNorm(64, dtype=dtype)
        self.drop2 = nn.Dropout(p, dropout_rng)
        self.out = nn.Linear(64, out, rng, dtype=dtype)

    def forward(self, h: Tensor) -> Tensor:
        z = self.drop1(F.gelu(self.norm1(self.fc1(h))))
        z = self.drop2(F.gelu(self.norm2(self.fc2(z))))
        return self.out(z)


class _Pair(nn.Module):
    def __init__(self, cls, reg):
        super().__init__()
        self.cls = cls
        self.reg = reg


def _check(check, path: str, t: Tensor) -> None:
    if check and not np.isfinite(t.value).all():
        raise NumericalError(f"non-finite activations in block {path!r}")


class HybridNet(nn.Module):
    """ECA -> (CNN, ViT) -> fusion -> task refinement -> gating -> two heads."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.seed = seed
        init = Rng(derive_seed(seed, "init"))
        self.dropout_rng = Rng(derive_seed(seed, "dropout"))
        d = cfg.fused_dim
        self.eca = ECA(cfg.in_channels, init, dtype=dtype)
        if cfg.use_cnn:
            self.cnn = CNNBranch(cfg, init, dtype=dtype)
        if cfg.use_vit:
            self.vit = ViTBranch(cfg, init, dtype=dtype)
        self.fuse = Fusion(cfg, init, dtype=dtype)
        self.refine = _Pair(Refinement(d, cfg.refine_dropout, init, self.dropout_rng, dtype=dtype),
                            Refinement(d, cfg.refine_dropout, init, self.dropout_rng, dtype=dtype))
        if cfg.gating:
            self.gate = _Pair(TaskGate(d, init, dtype=dtype), TaskGate(d, init, dtype=dtype))
        self.head = _Pair(
            Head(d, cfg.n_classes, cfg.head_dropout, init, self.dropout_rng, dtype=dtype)
            if cfg.tasks != "reg" else None,
            Head(d, cfg.n_markers, cfg.head_dropout, init, self.dropout_rng, dtype=dtype)
            if cfg.tasks != "cls" else None,
        )

    def state(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def reseed_dropout(self, seed: int | None = None) -> None:
        self.dropout_rng.reset(derive_seed(self.seed if seed is None else seed, "dropout"))

    def zero_residual_branches(self) -> None:
        """Zero the last layer of every residual branch (identity cascade)."""
        targets = []
        if self.cfg.use_cnn:
            for block in self.cnn.inception:
                targets += [c.weight for c in block.convs()] + [c.bias for c in block.convs()]
        if self.cfg.use_vit:
            for block in self.vit.blocks:
                targets += [block.attn.proj.weight, block.attn.proj.bias, block.fc2.weight, block.fc2.bias]
        for r in (self.refine.cls, self.refine.reg):
            targets += [r.fc2.weight, r.fc2.bias]
        for t in targets:
            t.value[...] = 0

    def forward(self, x, mode: str | None = None, check_finite: bool = True) -> Predictions:
        if mode is not None:
            self.train(mode == "train")
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.cfg
        expect = (cfg.in_channels, cfg.image_hw, cfg.image_hw)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise DimensionError(f"forward: input shape {x.shape}, expected [B, {expect[0]}, {expect[1]}, {expect[2]}]")
        if x.dtype != self.eca.weight.dtype:
            x = Tensor(x.value.astype(self.eca.weight.dtype))
        chk = check_finite

        xw = self.eca(x)
        _check(chk, "eca", xw)
        f_cnn = self.cnn(xw, chk) if cfg.use_cnn else None
        f_vit = self.vit(xw, chk) if cfg.use_vit else None
        h_fused, fusion_w = self.fuse(f_cnn, f_vit)
        _check(chk, "fuse", h_fused)
        h_cls = self.refine.cls(h_fused)
        h_reg = self.refine.reg(h_fused)
        _check(chk, "refine", h_cls)
        _check(chk, "refine", h_reg)

        diagnostics = {"fusion_weights": fusion_w}
        if cfg.gating:
            joint = F.concat([h_cls, h_reg], axis=1)
            t_cls, g_cls = self.gate.cls(h_cls, joint)
            t_reg, g_reg = self.gate.reg(h_reg, joint)
            diagnostics["gate_mean_cls"] = np.float64(g_cls.value.mean())
            diagnostics["gate_mean_reg"] = np.float64(g_reg.value.mean())
            _check(chk, "gate", t_cls)
            _check(chk, "gate", t_reg)
        else:
            t_cls, t_reg = h_cls, h_reg

        cls_probs = reg_values = None
        if self.head.cls is not None:
            cls_probs = F.softmax(self.head.cls(t_cls), axis=-1)
            _check(chk, "head.cls", cls_probs)
        if self.head.reg is not None:
            reg_values = self.head.reg(t_reg)
            _check(chk, "head.reg", reg_values)
        features = {"h_fused": h_fused, "h_cls": h_cls, "h_reg": h_reg, "t_cls": t_cls, "t_reg": t_reg}
        if f_cnn is not None:
            features["f_cnn"] = f_cnn
        if f_vit is not None:
            features["f_vit"] = f_vit
        return Predictions(cls_probs, reg_values, features, diagnostics)
