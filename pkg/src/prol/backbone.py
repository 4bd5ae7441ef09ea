"""Tiny ViT used as the frozen pretrained model, with prefix-tuning K/V injection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import container
from .errors import CheckpointError, ContractError, TrainingDiverged


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    patch_size: int = 4
    image_side: int = 16
    channels: int = 3
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError("backbone needs at least one layer")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_side % self.patch_size:
            raise ContractError("image_side must be a multiple of patch_size")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1


@dataclass
class PrefixPrompt:
    """Per-sample prefix keys/values.

    ``keys`` and ``values`` are (B, len(layers), H, l, head_dim); entry ``[:, j]``
    is injected at backbone layer ``layers[j]``.
    """

    layers: tuple
    keys: Tensor
    values: Tensor

    @property
    def length(self) -> int:
        return self.keys.shape[3]

    def validate(self, config: BackboneConfig, batch: int) -> None:
        layers = list(self.layers)
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ContractError(f"injected layers must be strictly increasing: {layers}")
        if layers and (layers[0] < 0 or layers[-1] >= config.layers):
            raise ContractError(f"injected layer index out of range for L={config.layers}: {layers}")
        expected = (batch, len(layers), config.heads)
        for name, t in (("keys", self.keys), ("values", self.values)):
            if tuple(t.shape[:3]) != expected or t.shape[4] != config.head_dim:
                raise ContractError(f"prompt {name} shape {tuple(t.shape)} does not fit batch/config")
        if self.keys.shape != self.values.shape:
            raise ContractError("prompt keys and values differ in shape")
        if layers and self.length < 1:
            raise ContractError("prompt length must be >= 1")


class PrefixAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, prefix_k: Tensor | None = None, prefix_v: Tensor | None = None,
                keep_scores: bool = False):
        B, n, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(x).reshape(B, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        if prefix_k is not None:
            # queries stay unprefixed; prefix positions carry no positional embedding
            k = torch.cat([prefix_k, k], dim=2)
            v = torch.cat([prefix_v, v], dim=2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, n, D)
        return self.proj(out), (attn if keep_scores else None)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = PrefixAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, prefix_k=None, prefix_v=None, keep_scores=False):
        h, scores = self.attn(self.norm1(x), prefix_k, prefix_v, keep_scores)
        x = x + h
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, scores


class ViT(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Linear(c.patch_size * c.patch_size * c.channels, c.dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, c.tokens, c.dim))
        self.blocks = nn.ModuleList(Block(c.dim, c.heads, c.mlp_ratio) for _ in range(c.layers))
        self.norm = nn.LayerNorm(c.dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def patchify(self, x: Tensor) -> Tensor:
        c = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.image_side, c.image_side, c.channels):
            raise ContractError(
                f"expected images (B, {c.image_side}, {c.image_side}, {c.channels}), got {tuple(x.shape)}")
        B, p = x.shape[0], c.patch_size
        g = c.image_side // p
        x = x.reshape(B, g, p, g, p, c.channels).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, p * p * c.channels)

    def embed(self, x: Tensor) -> Tensor:
        tokens = self.patch_embed(self.patchify(x))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def forward(self, x: Tensor, prompts: PrefixPrompt | None = None, keep_scores: bool = False):
        """Class-token feature (B, D); with ``keep_scores`` also per-layer attention maps."""
        h = self.embed(x)
        slot = {}
        if prompts is not None:
            prompts.validate(self.config, x.shape[0])
            slot = {layer: j for j, layer in enumerate(prompts.layers)}
        scores = []
        for i, block in enumerate(self.blocks):
            if i in slot:
                j = slot[i]
                h, s = block(h, prompts.keys[:, j], prompts.values[:, j], keep_scores)
            else:
                h, s = block(h, keep_scores=keep_scores)
            scores.append(s)
        feat = self.norm(h)[:, 0]
        return (feat, scores) if keep_scores else feat


class Backbone:
    """A ViT whose parameters are frozen, plus its provenance."""

    def __init__(self, model: ViT, base_class_count: int = 0):
        self.model = model
        self.base_class_count = base_class_count
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def config(self) -> BackboneConfig:
        return self.model.config

    def state_tensors(self) -> dict:
        return {f"theta/{k}": v for k, v in self.model.state_dict().items()}

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.model.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def to(self, dtype) -> "Backbone":
        self.model.to(dtype)
        return self

    def query(self, x: Tensor, source: str = "class_feature") -> Tensor:
        """Input representation matched against class keys."""
        if source == "class_feature":
            return forward_plain(self, x)
        with torch.no_grad():
            if source == "patch_embedding":
                return self.model.patch_embed(self.model.patchify(x)).mean(dim=1)
            if source == "class_token":
                return self.model.embed(x)[:, 0]
        raise ContractError(f"unknown match source {source!r}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    return x.to(dtype) if dtype is not None else x


def forward_plain(backbone: Backbone, x) -> Tensor:
    x = as_tensor(x, next(backbone.model.parameters()).dtype)
    with torch.no_grad():
        return backbone.model(x)


def forward_prompted(backbone: Backbone, x, prompts: PrefixPrompt | None, keep_scores: bool = False):
    """Prompted forward; gradients flow into the prompts but never into theta."""
    x = as_tensor(x, next(backbone.model.parameters()).dtype)
    return backbone.model(x, prompts, keep_scores=keep_scores)


def init_backbone(config: BackboneConfig, seed: int) -> Backbone:
    torch.manual_seed(seed)
    return Backbone(ViT(config))


def pretrain_base(config: BackboneConfig, base_dataset, epochs: int, lr: float, seed: int,
                  batch_size: int = 32, cl_classes: Sequence[int] = (),
                  base_classes: Sequence[int] | None = None, log=None) -> Backbone:
    """Supervised pretraining on held-out base classes; the temporary head is discarded.

    ``cl_classes`` and ``base_classes`` are label ids in a shared namespace; they
    must not overlap. The returned backbone carries ``train_accuracy``.
    """
    if base_classes is not None and set(base_classes) & set(cl_classes):
        raise ContractError("pretraining classes overlap the continual-learning classes")
    torch.manual_seed(seed)
    model = ViT(config)
    head = nn.Linear(config.dim, base_dataset.class_count)
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.05)
    x_all = torch.from_numpy(base_dataset.images)
    y_all = torch.from_numpy(base_dataset.labels)
    rng = np.random.default_rng(seed)
    n = len(y_all)
    steps = epochs * (-(-n // batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    model.train()
    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = F.cross_entropy(head(model(x_all[idx])), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"pretraining loss became {loss.item()} in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        if log is not None:
            log(f"pretrain epoch {epoch + 1}/{epochs} loss {loss.item():.4f}")
    model.eval()
    with torch.no_grad():
        correct = sum(int((head(model(x_all[s:s + 256])).argmax(1) == y_all[s:s + 256]).sum())
                      for s in range(0, n, 256))
    backbone = Backbone(model, base_dataset.class_count)
    backbone.train_accuracy = correct / max(n, 1)
    return backbone


def _config_tensor(config: BackboneConfig, base_class_count: int) -> Tensor:
    c = config
    return torch.tensor([c.layers, c.heads, c.dim, c.patch_size, c.image_side, c.channels,
                         c.mlp_ratio, base_class_count], dtype=torch.float32)


def save_checkpoint(backbone: Backbone, path) -> None:
    tensors = {"meta/config": _config_tensor(backbone.config, backbone.base_class_count)}
    tensors.update(backbone.state_tensors())
    container.write(path, tensors)


def load_checkpoint(path, config: BackboneConfig | None = None) -> Backbone:
    tensors = container.read(path)
    if "meta/config" not in tensors:
        raise CheckpointError(f"{path}: missing meta/config record")
    meta = tensors.pop("meta/config").tolist()
    stored = BackboneConfig(*(int(v) for v in meta[:6]), mlp_ratio=float(meta[6]))
    if config is not None and config != stored:
        raise CheckpointError(f"{path}: shape disagreement, stored config {stored} != declared {config}")
    model = ViT(stored)
    state = model.state_dict()
    loaded = {}
    for name, t in tensors.items():
        key = name.removeprefix("theta/")
        if key not in state:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if tuple(state[key].shape) != tuple(t.shape):
            raise CheckpointError(f"{path}: shape disagreement for {key}: {tuple(t.shape)} vs {tuple(state[key].shape)}")
        loaded[key] = t
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(loaded)
    return Backbone(model, int(meta[7]))


def config_dict(config: BackboneConfig) -> dict:
    return asdict(config)
