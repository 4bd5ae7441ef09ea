"""Online training loop: prompt generation, joint loss, freeze policy, clamp and HSU."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import container
from .backbone import Backbone, forward_plain, forward_prompted
from .errors import CheckpointError, ContractError, TrainingDiverged
from .objectives import (LossWeights, gen_matrix, loss_gen, loss_inter, loss_intra, loss_ort,
                         loss_sim, loss_total)
from .prompt_engine import ClassBank, PromptConfig, cosine, generate_prompts, init_generator, match_keys

SNAPSHOT_VERSION = 1


# ---------------------------------------------------------------- HSU schedule

@dataclass(frozen=True)
class HSUState:
    base_lr: float
    min_lr: float = 0.005
    t_max: int = 20
    threshold: float = 0.8
    mode: str = "hard"
    soft_step: int = 0

    @property
    def floor(self) -> float:
        # a base lr below min_lr would make the "decay" increase the lr
        return min(self.min_lr, self.base_lr)


def cosine_lr(base_lr: float, min_lr: float, step: int, t_max: int) -> float:
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * step / t_max))


def hsu_step(hsu: HSUState, ce: float, new_class_in_chunk: bool) -> tuple[float, HSUState]:
    """Learning rate for the current update and the next scheduler state.

    A chunk with a first-seen class forces hard mode. Hard mode holds
    ``base_lr`` and hands over to soft mode once ``ce`` drops below the
    threshold; soft mode anneals towards ``min_lr`` and stays there.
    """
    mode, step = hsu.mode, hsu.soft_step
    if new_class_in_chunk:
        mode, step = "hard", 0
    if mode == "hard":
        lr = hsu.base_lr
        if ce < hsu.threshold:
            mode, step = "soft", 0
    else:
        lr = cosine_lr(hsu.base_lr, hsu.floor, step, hsu.t_max)
        step = min(step + 1, hsu.t_max)
    return lr, replace(hsu, mode=mode, soft_step=step)


# ---------------------------------------------------------------- configuration

ABLATION_PRESETS = {
    "FT": dict(use_generator=False, use_scaler_shifter_keys=False, use_sim_loss=False,
               use_ort_loss=False, use_hsu=False, use_gen_matrix=False),
    "FT+G": dict(use_generator=True, use_scaler_shifter_keys=False, use_sim_loss=False,
                 use_ort_loss=False, use_hsu=False, use_gen_matrix=False),
    "FT+G+SS+K": dict(use_generator=True, use_scaler_shifter_keys=True, use_sim_loss=True,
                      use_ort_loss=True, use_hsu=False, use_gen_matrix=False),
    "FT+G+SS+K+HSU": dict(use_generator=True, use_scaler_shifter_keys=True, use_sim_loss=True,
                          use_ort_loss=True, use_hsu=True, use_gen_matrix=False),
    "FT+G+SS+K+HSU+M": dict(use_generator=True, use_scaler_shifter_keys=True, use_sim_loss=True,
                            use_ort_loss=True, use_hsu=True, use_gen_matrix=True),
}
FULL = "FT+G+SS+K+HSU+M"


@dataclass(frozen=True)
class AblationFlags:
    use_generator: bool = True
    use_scaler_shifter_keys: bool = True
    use_sim_loss: bool = True
    use_ort_loss: bool = True
    use_hsu: bool = True
    use_gen_matrix: bool = True

    def __post_init__(self):
        if self.use_scaler_shifter_keys and not self.use_generator:
            raise ContractError("scaler/shifter keys require the generator")
        if (self.use_sim_loss or self.use_ort_loss) and not self.use_scaler_shifter_keys:
            raise ContractError("key losses require class keys")

    @classmethod
    def preset(cls, name: str) -> "AblationFlags":
        try:
            return cls(**ABLATION_PRESETS[name])
        except KeyError:
            raise ContractError(f"unknown ablation {name!r}; choose from {list(ABLATION_PRESETS)}") from None

    @property
    def name(self) -> str:
        for key, val in ABLATION_PRESETS.items():
            if val == asdict(self):
                return key
        return "custom"


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class LearnerConfig:
    prompt: PromptConfig = field(default_factory=PromptConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    threshold: float = 0.8
    t_max: int = 20
    min_lr: float = 0.005
    ort_squared: bool = False
    standardize_gen: bool = True
    generator_scale: float = 0.5
    gate_grad: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        d = dict(d)
        return cls(prompt=PromptConfig(**d.pop("prompt")), weights=LossWeights(**d.pop("weights")),
                   optimizer=OptimizerConfig(**d.pop("optimizer")), flags=AblationFlags(**d.pop("flags")),
                   **d)


# ---------------------------------------------------------------- learner

def tensor_digest(tensors: Iterable[Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Learner:
    """Trainable state on top of a frozen backbone.

    Owns the generator, the class bank (keys plus scaler/shifter rows), the
    linear head, the Adam optimizer and the HSU scheduler. Backbone weights
    are never handed to the optimizer.
    """

    def __init__(self, backbone: Backbone, class_count: int, config: LearnerConfig | None = None,
                 log: Callable[[dict], None] | None = None):
        self.backbone = backbone
        self.class_count = class_count
        self.config = config = config or LearnerConfig()
        D, H = backbone.config.dim, backbone.config.heads
        if config.prompt.layers and config.prompt.layers[-1] >= backbone.config.layers:
            raise ContractError(f"prompt layers {config.prompt.layers} exceed backbone depth {backbone.config.layers}")
        self.generator = init_generator(config.prompt.layers, H, config.seed, config.generator_scale)
        self.bank = ClassBank(class_count, D, config.prompt.length, config.seed)
        self.head = nn.Linear(D, class_count)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.head_classes: list[int] = []
        self.named_params = self._trainable()
        oc = config.optimizer
        self.optimizer = torch.optim.Adam([p for _, p in self.named_params], lr=oc.lr,
                                          betas=(oc.beta1, oc.beta2), eps=oc.eps, foreach=False)
        self.hsu = HSUState(oc.lr, config.min_lr, config.t_max, config.threshold)
        self.task = 0
        self.task_classes: list[int] = []
        self.global_step = 0
        self.rng = np.random.default_rng(config.seed + 7919)
        self.log = log
        self.bound_violations = 0

    def _trainable(self) -> list[tuple[str, nn.Parameter]]:
        flags = self.config.flags
        named = []
        if flags.use_generator:
            named.append(("generator.kernels", self.generator.kernels))
        if flags.use_scaler_shifter_keys:
            named += [(f"bank.{n}", p) for n, p in self.bank.named_parameters()]
        named += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        return named

    @property
    def seen_classes(self) -> list[int]:
        return sorted(self.head_classes)

    # -- class registration

    def register_head_classes(self, ids: Sequence[int]) -> None:
        """Activate head rows for ``ids``; existing rows are left bit-identical."""
        for c in ids:
            c = int(c)
            if c in self.head_classes:
                raise ContractError(f"class {c} already has a head row")
            if not 0 <= c < self.class_count:
                raise ContractError(f"class id {c} outside head capacity {self.class_count}")
            g = torch.Generator().manual_seed(self.config.seed * 1_000_003 + 17 * c + 1)
            with torch.no_grad():
                self.head.weight[c] = torch.randn(self.head.in_features, generator=g) * 0.02
                self.head.bias[c] = 0.0
            self.head_classes.append(c)

    def register_classes(self, ids: Sequence[int]) -> list[int]:
        new = [int(c) for c in ids if int(c) not in self.head_classes]
        for c in new:
            self.bank.register(c, self.task)
        self.register_head_classes(new)
        self.task_classes.extend(new)
        return new

    # -- forward paths

    def _query(self, x: Tensor, f_plain: Tensor) -> Tensor:
        src = self.config.prompt.match_source
        return f_plain if src == "class_feature" else self.backbone.query(x, src)

    def _prompts(self, q: Tensor, classes: Tensor, s: Tensor | None):
        flags = self.config.flags
        if not flags.use_generator:
            return None
        B = q.shape[0]
        if flags.use_scaler_shifter_keys:
            b = self.bank
            return generate_prompts(q, s, b.a_k[classes], b.b_k[classes], b.a_v[classes], b.b_v[classes],
                                    self.generator)
        n = self.config.prompt.length - 1
        ones = torch.ones(B, n, dtype=q.dtype)
        zeros = torch.zeros(B, n, dtype=q.dtype)
        return generate_prompts(q, torch.ones(B, dtype=q.dtype), ones, zeros, ones, zeros, self.generator)

    def logits(self, x) -> Tensor:
        """Head outputs for all capacity rows, using inference-time key matching."""
        if not self.head_classes:
            raise ContractError("no classes registered")
        x = torch.as_tensor(x)
        with torch.no_grad():
            f_plain = forward_plain(self.backbone, x)
            q = self._query(x, f_plain)
            s = None
            classes = None
            if self.config.flags.use_scaler_shifter_keys:
                classes, s = match_keys(q, self.bank.keys, self.bank.registered)
            prompts = self._prompts(q, classes, s)
            feats = f_plain if prompts is None else forward_prompted(self.backbone, x, prompts)
            return self.head(feats)

    def predict(self, x) -> np.ndarray:
        registered = torch.tensor(self.seen_classes)
        out = self.logits(x)[:, registered]
        return registered[out.argmax(dim=1)].numpy()

    # -- training

    def train_task(self, t: int, chunks: Iterable, on_step: Callable | None = None) -> "Learner":
        if t != self.task + 1:
            raise ContractError(f"tasks must be trained in order: expected task {self.task + 1}, got {t}")
        self.task = t
        self.task_classes = []
        if t > 1 and not self.generator.frozen:
            self.generator.freeze()
        for chunk in chunks:
            record = self.step(chunk)
            if on_step is not None:
                on_step(self, record)
        return self

    def step(self, chunk) -> dict:
        cfg, flags = self.config, self.config.flags
        x = torch.as_tensor(chunk.x)
        y = torch.as_tensor(chunk.y).long()
        new = self.register_classes(sorted(set(y.tolist())))

        f_plain = forward_plain(self.backbone, x)
        q = self._query(x, f_plain).detach()
        keys = self.bank.keys[y] if flags.use_scaler_shifter_keys else None
        s = cosine(q, keys) if keys is not None else None
        if s is not None and not cfg.gate_grad:
            s = s.detach()
        prompts = self._prompts(q, y, s)
        f_p = f_plain if prompts is None else forward_prompted(self.backbone, x, prompts)
        logits = self.head(f_p)

        zero = torch.zeros((), dtype=logits.dtype)
        intra = loss_intra(logits, y, self.task_classes)
        inter = loss_inter(logits, y, self.seen_classes)
        sim = loss_sim(q, keys) if flags.use_sim_loss else zero
        ort = zero
        if flags.use_ort_loss:
            old = [c for c in self.bank.registered if self.bank.created_task[c] < self.task]
            if old:
                pick = torch.as_tensor(np.asarray(old)[self.rng.integers(len(old), size=len(y))])
                ort = loss_ort(keys, self.bank.keys[pick].detach(), cfg.ort_squared)
        gen = zero
        if flags.use_gen_matrix and prompts is not None and len(y) >= (2 if cfg.standardize_gen else 1):
            gen = loss_gen(gen_matrix(f_plain, f_p, cfg.standardize_gen))
        report = loss_total(intra, inter, sim, ort, gen, cfg.weights)
        if not torch.isfinite(report.total):
            raise TrainingDiverged(f"task {self.task} chunk {chunk.chunk_id}: total loss {float(report.total)}")

        if flags.use_hsu:
            lr, nxt = hsu_step(self.hsu, float(report.ce.detach()), bool(new))
            mode = "hard" if (new or self.hsu.mode == "hard") else "soft"
            self.hsu = nxt
        else:
            lr, mode = cfg.optimizer.lr, "fixed"
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()
        self.bank.clamp_(cfg.prompt.eps_a, cfg.prompt.eps_b)
        if self.bank.registered and not self.bank.within_bounds(cfg.prompt.eps_a, cfg.prompt.eps_b):
            self.bound_violations += 1

        self.global_step += 1
        record = report.record(step=self.global_step, task=self.task, chunk=int(chunk.chunk_id),
                               lr=lr, mode=mode, new_classes=new)
        if self.log is not None:
            self.log(record)
        return record

    # -- digests used by invariant checks

    def generator_digest(self) -> str:
        return tensor_digest([self.generator.kernels])

    # -- persistence

    def snapshot(self, path) -> None:
        path = Path(path)
        tensors = {}
        for bi, branch in enumerate("KV"):
            for li, layer in enumerate(self.generator.layers):
                for h in range(self.generator.heads):
                    tensors[f"learner/gen/{branch}/layer{layer}/head{h}"] = self.generator.kernels[bi, li, h]
        for c in self.bank.registered:
            st = self.bank.state(c)
            for name, t in (("key", st.key), ("aK", st.a_k), ("bK", st.b_k), ("aV", st.a_v), ("bV", st.b_v)):
                tensors[f"learner/class{c}/{name}"] = t
        tensors["learner/head/weight"] = self.head.weight
        tensors["learner/head/bias"] = self.head.bias
        steps = {}
        for name, p in self.named_params:
            st = self.optimizer.state.get(p)
            if st:
                tensors[f"learner/optim/{name}/exp_avg"] = st["exp_avg"]
                tensors[f"learner/optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
                steps[name] = float(st["step"])
        container.write(path, {k: v.detach().float() for k, v in tensors.items()}, SNAPSHOT_VERSION)
        sidecar = {
            "version": SNAPSHOT_VERSION,
            "class_count": self.class_count,
            "config": self.config.to_dict(),
            "hsu": asdict(self.hsu),
            "task": self.task,
            "task_classes": self.task_classes,
            "head_classes": self.head_classes,
            "created_task": {str(c): t for c, t in self.bank.created_task.items()},
            "generator_frozen": self.generator.frozen,
            "global_step": self.global_step,
            "adam_steps": steps,
            "rng": self.rng.bit_generator.state,
            "backbone_digest": self.backbone.digest(),
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def restore(cls, path, backbone: Backbone, log=None) -> "Learner":
        path = Path(path)
        try:
            meta = json.loads(Path(str(path) + ".json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read snapshot sidecar for {path}: {exc}") from exc
        if meta.get("version") != SNAPSHOT_VERSION:
            raise CheckpointError(f"snapshot version {meta.get('version')} unsupported")
        if meta["backbone_digest"] != backbone.digest():
            raise CheckpointError("snapshot was taken against a different backbone")
        tensors = container.read(path, SNAPSHOT_VERSION)
        learner = cls(backbone, meta["class_count"], LearnerConfig.from_dict(meta["config"]), log=log)

        def take(name, like):
            t = tensors.get(name)
            if t is None:
                raise CheckpointError(f"snapshot missing tensor {name}")
            if t.shape != like.shape:
                raise CheckpointError(f"snapshot shape mismatch for {name}: {tuple(t.shape)} vs {tuple(like.shape)}")
            return t

        with torch.no_grad():
            k = learner.generator.kernels
            for bi, branch in enumerate("KV"):
                for li, layer in enumerate(learner.generator.layers):
                    for h in range(learner.generator.heads):
                        k[bi, li, h] = take(f"learner/gen/{branch}/layer{layer}/head{h}", k[bi, li, h])
            bank = learner.bank
            for c_str, t in meta["created_task"].items():
                c = int(c_str)
                bank.created_task[c] = t
                for name, param in (("key", bank.keys), ("aK", bank.a_k), ("bK", bank.b_k),
                                    ("aV", bank.a_v), ("bV", bank.b_v)):
                    param[c] = take(f"learner/class{c}/{name}", param[c])
            learner.head.weight.copy_(take("learner/head/weight", learner.head.weight))
            learner.head.bias.copy_(take("learner/head/bias", learner.head.bias))
        if meta["generator_frozen"]:
            learner.generator.freeze()
        for name, p in learner.named_params:
            if name in meta["adam_steps"]:
                learner.optimizer.state[p] = {
                    "step": torch.tensor(meta["adam_steps"][name], dtype=torch.float32),
                    "exp_avg": take(f"learner/optim/{name}/exp_avg", p).clone(),
                    "exp_avg_sq": take(f"learner/optim/{name}/exp_avg_sq", p).clone(),
                }
        learner.hsu = HSUState(**meta["hsu"])
        learner.task = meta["task"]
        learner.task_classes = list(meta["task_classes"])
        learner.head_classes = list(meta["head_classes"])
        learner.global_step = meta["global_step"]
        learner.rng.bit_generator.state = meta["rng"]
        return learner
