"""Layers, losses, optimizer and checkpoints for the point networks.

Reverse-mode differentiation is torch autograd in float64. Networks are
plain affine + ReLU stacks (no batch norm, no dropout) applied row-wise to
point sets, with a first-index max-pool as the symmetric function.

Checkpoint layout (a directory): ``model.json`` holds the network config
and the ordered list of parameter names and shapes; ``params.f64`` is the
little-endian float64 concatenation of those parameters in that order.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
BCE_EPS = 1e-7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]  # input width first
    out_act: str = "relu"  # relu | none | sigmoid | softmax
    groups: tuple[int, ...] = ()  # group sizes for out_act="softmax"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError(f"invalid MLP widths {self.widths}")
        if self.out_act not in ("relu", "none", "sigmoid", "softmax"):
            raise ConfigError(f"unknown output activation {self.out_act}")
        if self.out_act == "softmax" and sum(self.groups) != self.widths[-1]:
            raise ConfigError("softmax groups must cover the output width")


class MLP(nn.Module):
    """Affine + ReLU stack applied to the last dimension (shared across rows)."""

    def __init__(self, spec: MLPSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(spec.widths[:-1], spec.widths[1:]))
        for layer in self.layers:
            bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
            nn.init.uniform_(layer.weight, -bound, bound)
            nn.init.zeros_(layer.bias)

    @property
    def in_width(self) -> int:
        return self.spec.widths[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_width:
            raise ConfigError(f"expected width {self.in_width}, got {x.shape[-1]}")
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.spec.out_act == "relu":
                x = torch.relu(x)
        if self.spec.out_act == "sigmoid":
            x = torch.sigmoid(x)
        elif self.spec.out_act == "softmax":
            x = torch.cat([torch.softmax(g, -1) for g in torch.split(x, list(self.spec.groups), -1)], -1)
        return x


def shared_mlp(points: torch.Tensor, mlp: MLP) -> torch.Tensor:
    """Apply the same MLP to every row of an (..., N, D) point set."""
    return mlp(points)


def max_pool(x: torch.Tensor) -> torch.Tensor:
    """Column-wise max over the point axis (-2); ties route gradient to the lowest row."""
    if x.shape[-2] < 1:
        raise ValueError("max_pool needs at least one row")
    idx = x.argmax(dim=-2, keepdim=True)  # first occurrence of the maximum
    return x.gather(-2, idx).squeeze(-2)


# -- losses -------------------------------------------------------------------

def smooth_l1(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Summed smooth-L1 with the transition at |d| = 1."""
    d = torch.abs(pred - target)
    return torch.where(d < 1.0, 0.5 * d * d, d - 0.5).sum()


def smooth_l1_each(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    d = torch.abs(pred - target)
    return torch.where(d < 1.0, 0.5 * d * d, d - 0.5)


def bce(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    target = torch.as_tensor(target, dtype=p.dtype)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def softmax_ce(logits: torch.Tensor, label) -> torch.Tensor:
    """Cross-entropy of softmax(logits) at ``label``; batched input is averaged."""
    label = torch.as_tensor(label, dtype=torch.long)
    logp = torch.log_softmax(logits, -1)
    if logits.dim() == 1:
        return -logp[label]
    return -logp.gather(-1, label.unsqueeze(-1)).squeeze(-1).mean()


# -- optimizer ----------------------------------------------------------------

def adam_step(params, grads, state: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update of ``params`` (tensors) with bias correction."""
    t = state.get("t", 0) + 1
    state["t"] = t
    ms = state.setdefault("m", [torch.zeros_like(p) for p in params])
    vs = state.setdefault("v", [torch.zeros_like(p) for p in params])
    if len(ms) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, ms, vs):
            if g is None:
                continue
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, module: nn.Module, config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names, shapes, flat = [], [], []
    for name, p in module.state_dict().items():
        names.append(name)
        shapes.append(list(p.shape))
        flat.append(p.detach().to(DTYPE).reshape(-1).numpy())
    manifest = {"config": config, "params": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
                "extra": extra or {}}
    with open(path / "model.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    data = np.concatenate(flat) if flat else np.zeros(0)
    data.astype("<f8").tofile(path / "params.f64")
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    with open(path / "model.json") as f:
        manifest = json.load(f)
    data = np.fromfile(path / "params.f64", dtype="<f8")
    expected = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in manifest["params"])
    if expected != len(data):
        raise ConfigError(f"{path}: parameter file holds {len(data)} values, manifest expects {expected}")
    tensors, offset = {}, 0
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        tensors[entry["name"]] = torch.from_numpy(data[offset:offset + n].copy()).reshape(entry["shape"])
        offset += n
    return manifest, tensors


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
