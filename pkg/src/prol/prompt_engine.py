"""Single lightweight prompt generator, per-class keys and scaler/shifter banks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import PrefixPrompt
from .errors import ContractError

MATCH_SOURCES = ("class_feature", "class_token", "patch_embedding")


@dataclass(frozen=True)
class PromptConfig:
    length: int = 5
    layers: tuple = (0, 1, 2)
    eps_a: float = 0.2
    eps_b: float = 0.1
    match_source: str = "class_feature"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        if self.length < 2:
            raise ContractError("prompt length must be >= 2")
        if not (self.eps_a > 0 and self.eps_b > 0):
            raise ContractError("eps_a and eps_b must be positive")
        if self.match_source not in MATCH_SOURCES:
            raise ContractError(f"match_source must be one of {MATCH_SOURCES}")
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])) or (self.layers and self.layers[0] < 0):
            raise ContractError(f"prompt layers must be strictly increasing and >= 0: {self.layers}")


class PromptGenerator(nn.Module):
    """Bank of 3-tap kernels indexed by (branch K/V, injected layer, head); no bias."""

    def __init__(self, layers: Sequence[int], heads: int, kernels: Tensor | None = None):
        super().__init__()
        self.layers = tuple(layers)
        self.heads = heads
        if kernels is None:
            kernels = torch.zeros(2, len(self.layers), heads, 3)
        self.kernels = nn.Parameter(kernels)
        self.frozen = False

    def freeze(self) -> None:
        self.kernels.requires_grad_(False)
        self.frozen = True

    def parameter_count(self) -> int:
        return self.kernels.numel()

    def kernel(self, branch: str, layer: int, head: int) -> Tensor:
        return self.kernels[("K", "V").index(branch), self.layers.index(layer), head]


def init_generator(layers: Sequence[int], heads: int, seed: int, scale: float = 0.5) -> PromptGenerator:
    if heads < 1:
        raise ContractError("heads must be >= 1")
    g = torch.Generator().manual_seed(seed)
    kernels = (torch.rand(2, len(layers), heads, 3, generator=g) * 2 - 1) * scale
    return PromptGenerator(layers, heads, kernels)


def generator_parameter_count(n_layers: int, heads: int) -> int:
    return 2 * n_layers * heads * 3


def scaler_shifter_count(length: int) -> int:
    return 4 * (length - 1)


def conv_same(kernel: Tensor, v: Tensor) -> Tensor:
    """3-tap cross-correlation along the last axis, zero padding 1, stride 1.

    out[i] = k0*v[i-1] + k1*v[i] + k2*v[i+1]. ``kernel`` broadcasts against
    ``v.shape[:-1] + (3,)``.
    """
    vp = F.pad(v, (1, 1))
    return kernel[..., 0:1] * vp[..., :-2] + kernel[..., 1:2] * vp[..., 1:-1] + kernel[..., 2:3] * vp[..., 2:]


@dataclass
class ClassState:
    """View of one class's parameters; tensors may share storage with a ClassBank."""

    class_id: int
    key: Tensor
    a_k: Tensor
    b_k: Tensor
    a_v: Tensor
    b_v: Tensor
    created_task: int = 1


def register_class(c: int, dim: int, length: int, seed: int, created_task: int = 1,
                   dtype=torch.float32) -> ClassState:
    g = torch.Generator().manual_seed(seed * 1_000_003 + c)
    key = torch.randn(dim, generator=g, dtype=torch.float64)
    key = (key / key.norm()).to(dtype)
    ones = torch.ones(length - 1, dtype=dtype)
    zeros = torch.zeros(length - 1, dtype=dtype)
    return ClassState(c, key, ones.clone(), zeros.clone(), ones.clone(), zeros.clone(), created_task)


class ClassBank(nn.Module):
    """Pre-allocated keys and scaler/shifter rows for every class id.

    Rows of unregistered classes stay untouched and are never read by the
    training or inference paths.
    """

    def __init__(self, capacity: int, dim: int, length: int, seed: int = 0):
        super().__init__()
        self.capacity, self.dim, self.length, self.seed = capacity, dim, length, seed
        self.keys = nn.Parameter(torch.zeros(capacity, dim))
        self.a_k = nn.Parameter(torch.ones(capacity, length - 1))
        self.b_k = nn.Parameter(torch.zeros(capacity, length - 1))
        self.a_v = nn.Parameter(torch.ones(capacity, length - 1))
        self.b_v = nn.Parameter(torch.zeros(capacity, length - 1))
        self.created_task: dict[int, int] = {}

    @property
    def registered(self) -> list[int]:
        return sorted(self.created_task)

    def __contains__(self, c) -> bool:
        return int(c) in self.created_task

    def register(self, c: int, task: int) -> ClassState:
        c = int(c)
        if c in self.created_task:
            raise ContractError(f"class {c} is already registered")
        if not 0 <= c < self.capacity:
            raise ContractError(f"class id {c} outside bank capacity {self.capacity}")
        fresh = register_class(c, self.dim, self.length, self.seed, task, self.keys.dtype)
        with torch.no_grad():
            for name in ("key", "a_k", "b_k", "a_v", "b_v"):
                getattr(self, "keys" if name == "key" else name)[c] = getattr(fresh, name)
        self.created_task[c] = task
        return self.state(c)

    def state(self, c: int) -> ClassState:
        c = int(c)
        if c not in self.created_task:
            raise ContractError(f"class {c} is not registered")
        return ClassState(c, self.keys[c], self.a_k[c], self.b_k[c], self.a_v[c], self.b_v[c],
                          self.created_task[c])

    def clamp_(self, eps_a: float, eps_b: float) -> None:
        with torch.no_grad():
            for a in (self.a_k, self.a_v):
                a.clamp_(1 - eps_a, 1 + eps_a)
            for b in (self.b_k, self.b_v):
                b.clamp_(-eps_b, eps_b)

    def within_bounds(self, eps_a: float, eps_b: float) -> bool:
        rows = self.registered
        with torch.no_grad():
            a = torch.cat([self.a_k[rows], self.a_v[rows]])
            b = torch.cat([self.b_k[rows], self.b_v[rows]])
            return bool(((a >= 1 - eps_a) & (a <= 1 + eps_a)).all() and ((b >= -eps_b) & (b <= eps_b)).all())


def clamp_class(state: ClassState, eps_a: float, eps_b: float) -> ClassState:
    """Project scalers into [1-eps_a, 1+eps_a] and shifters into [-eps_b, eps_b] in place."""
    with torch.no_grad():
        state.a_k.clamp_(1 - eps_a, 1 + eps_a)
        state.a_v.clamp_(1 - eps_a, 1 + eps_a)
        state.b_k.clamp_(-eps_b, eps_b)
        state.b_v.clamp_(-eps_b, eps_b)
    return state


def cosine(q: Tensor, k: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise cosine with the norm product guarded from below by ``eps``."""
    return (q * k).sum(-1) / torch.clamp(q.norm(dim=-1) * k.norm(dim=-1), min=eps)


def match_keys(q: Tensor, keys: Tensor, scope: Iterable[int]) -> tuple[Tensor, Tensor]:
    """Top-1 cosine match of each row of ``q`` (B, D) among ``keys[scope]``.

    Ties resolve to the smallest class id.
    """
    scope = sorted(int(c) for c in scope)
    if not scope:
        raise ContractError("match scope is empty")
    idx = torch.tensor(scope)
    cand = keys[idx]
    sims = (q @ cand.T) / torch.clamp(q.norm(dim=-1, keepdim=True) * cand.norm(dim=-1)[None], min=1e-8)
    best = sims.argmax(dim=1)
    return idx[best], sims.gather(1, best[:, None])[:, 0]


def match_key(q: Tensor, bank: ClassBank, scope: Iterable[int]) -> tuple[int, float]:
    if not torch.any(q != 0):
        raise ContractError("query vector is zero")
    c, s = match_keys(q[None], bank.keys.detach(), scope)
    return int(c[0]), float(s[0])


def generate_prompts(q: Tensor, s: Tensor, a_k: Tensor, b_k: Tensor, a_v: Tensor, b_v: Tensor,
                     generator: PromptGenerator) -> PrefixPrompt:
    """Batched prompt assembly.

    q: (B, D) input feature; s: (B,) similarity factor; a_*, b_*: (B, l-1).
    Position 1 of each prompt is the gated generator output itself; positions
    2..l are its per-class affine transforms.
    """
    if not torch.isfinite(q).all():
        raise ContractError("query feature contains non-finite values")
    B, D = q.shape
    H = generator.heads
    qh = q.reshape(B, 1, H, D // H)
    gate = s.reshape(B, 1, 1, 1)
    prompts = []
    for branch, (a, b) in enumerate(((a_k, b_k), (a_v, b_v))):
        g = gate * conv_same(generator.kernels[branch][None], qh)  # (B, nL, H, hd)
        g = g.unsqueeze(3)
        rest = a.reshape(B, 1, 1, -1, 1) * g + b.reshape(B, 1, 1, -1, 1)
        prompts.append(torch.cat([g, rest], dim=3))
    return PrefixPrompt(generator.layers, prompts[0], prompts[1])


def generate_prompt(q: Tensor, state: ClassState, s, generator: PromptGenerator,
                    config: PromptConfig | None = None) -> PrefixPrompt:
    """Single-sample form; the result has a leading batch axis of 1."""
    s = torch.as_tensor(s, dtype=q.dtype).reshape(1)
    return generate_prompts(q[None], s, state.a_k[None], state.b_k[None], state.a_v[None],
                            state.b_v[None], generator)
