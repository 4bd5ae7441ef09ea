"""The five training losses, the generalization matrix and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ContractError

SIM_EPS = 1e-8
STD_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    intra: float = 1.0
    inter: float = 0.03
    sim: float = 1.0
    ort: float = 1.0
    gen: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v < float("inf")):
                raise ContractError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(*(k * getattr(self, f.name) for f in fields(self)))


@dataclass
class LossReport:
    intra: Tensor
    inter: Tensor
    sim: Tensor
    ort: Tensor
    gen: Tensor
    ce: Tensor
    total: Tensor

    def record(self, **extra) -> dict:
        out = dict(extra)
        for name in ("intra", "inter", "sim", "ort", "gen", "ce", "total"):
            out[name] = float(getattr(self, name).detach())
        return out


def _masked_ce(logits: Tensor, y: Tensor, classes: Sequence[int], what: str) -> Tensor:
    classes = sorted(int(c) for c in classes)
    if not classes:
        raise ContractError(f"{what}: empty class set")
    cols = torch.tensor(classes, device=logits.device)
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        target = torch.tensor([lookup[int(c)] for c in y], device=logits.device)
    except KeyError as exc:
        raise ContractError(f"{what}: label {exc.args[0]} outside the allowed class set") from None
    # column selection keeps excluded logits entirely out of the computation
    return F.cross_entropy(logits.index_select(1, cols), target)


def loss_intra(logits: Tensor, y: Tensor, current_classes: Sequence[int]) -> Tensor:
    """Cross-entropy with the softmax restricted to the current task's classes."""
    return _masked_ce(logits, y, current_classes, "loss_intra")


def loss_inter(logits: Tensor, y: Tensor, seen_classes: Sequence[int]) -> Tensor:
    """Cross-entropy over every class learned so far."""
    return _masked_ce(logits, y, seen_classes, "loss_inter")


def loss_sim(q: Tensor, key: Tensor) -> Tensor:
    """Negative guarded cosine; batched rows are averaged."""
    val = -(q * key).sum(-1) / torch.clamp(q.norm(dim=-1) * key.norm(dim=-1), min=SIM_EPS)
    return val.mean() if val.dim() else val


def loss_ort(new_keys: Tensor, old_keys: Tensor | None, squared: bool = False) -> Tensor:
    """Mean dot product between paired current-class and previous-class keys.

    With no previous classes the loss is a constant zero.
    """
    if old_keys is None or old_keys.numel() == 0:
        return torch.zeros((), dtype=new_keys.dtype)
    if new_keys.shape != old_keys.shape:
        raise ContractError("new and old key lists differ in shape")
    dots = (new_keys * old_keys).sum(-1)
    return (dots ** 2 if squared else dots).mean()


def gen_matrix(f_plain: Tensor, f_prompted: Tensor, standardize: bool = True) -> Tensor:
    """(1/B) f_plain^T f_prompted, optionally on column-standardized features."""
    if f_plain.shape != f_prompted.shape or f_plain.dim() != 2:
        raise ContractError("feature matrices must share shape (B, D)")
    B = f_plain.shape[0]
    if standardize:
        if B < 2:
            raise ContractError("standardized generalization matrix needs B >= 2")
        f_plain = _standardize(f_plain)
        f_prompted = _standardize(f_prompted)
    return f_plain.T @ f_prompted / B


def _standardize(f: Tensor) -> Tensor:
    mu = f.mean(dim=0, keepdim=True)
    # eps sits under the root so constant columns keep a finite gradient
    sd = ((f - mu).pow(2).mean(dim=0, keepdim=True) + STD_EPS).sqrt()
    return (f - mu) / sd


def loss_gen(M: Tensor) -> Tensor:
    D = M.shape[0]
    if M.dim() != 2 or M.shape[1] != D:
        raise ContractError("generalization matrix must be square")
    if D < 2:
        raise ContractError("loss_gen needs D >= 2")
    diag = torch.diagonal(M)
    on = (1 - diag).pow(2).sum() / D
    off_mask = ~torch.eye(D, dtype=torch.bool, device=M.device)
    off = M[off_mask].pow(2).sum() / (D * (D - 1))
    return on + off


def loss_total(intra, inter, sim, ort, gen, weights: LossWeights) -> LossReport:
    ce = weights.intra * intra + weights.inter * inter
    total = ce + weights.sim * sim + weights.ort * ort + weights.gen * gen
    as_t = lambda v: v if isinstance(v, Tensor) else torch.tensor(float(v))  # noqa: E731
    return LossReport(as_t(intra), as_t(inter), as_t(sim), as_t(ort), as_t(gen), as_t(ce), as_t(total))
