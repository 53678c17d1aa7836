"""Parameter groups, Adam updates, the loss stack and loss logging.

Gradients come from torch autograd. Each named parameter group carries its
own learning rate and a trainable flag; frozen groups have
``requires_grad=False`` so they cannot drift.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

LAMBDA_RESIDUAL = 10.0
REG_WEIGHTS = {"mask": 0.1, "albedo_smooth": 0.01, "rough_smooth": 0.01, "light_smooth": 0.001,
               "light_white": 0.001}


class NumericError(FloatingPointError):
    """A loss or gradient became NaN/Inf; ``source`` names the offending term."""

    def __init__(self, source: str, step: int | None = None):
        self.source = source
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in {source}{where}")


@dataclass
class ParamGroup:
    name: str
    params: list
    lr: float
    trainable: bool = True

    def numel(self) -> int:
        return sum(p.numel() for p in self.params)

    def flat(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.params]) if self.params else torch.zeros(0)


class ParamStore:
    """Named, disjoint parameter groups with per-group learning rates."""

    def __init__(self):
        self.groups: dict[str, ParamGroup] = {}
        self._owner: dict[int, str] = {}
        self._opt = None

    def add(self, name: str, params, lr: float, trainable: bool = True) -> ParamGroup:
        if name in self.groups:
            raise ValueError(f"duplicate parameter group {name!r}")
        params = list(params)
        for p in params:
            if id(p) in self._owner:
                raise ValueError(f"parameter already belongs to group {self._owner[id(p)]!r}")
        for p in params:
            self._owner[id(p)] = name
            p.requires_grad_(trainable)
        g = ParamGroup(name, params, float(lr), trainable)
        self.groups[name] = g
        self._opt = None
        return g

    def __getitem__(self, name: str) -> ParamGroup:
        return self.groups[name]

    def trainable(self) -> list[ParamGroup]:
        return [g for g in self.groups.values() if g.trainable and g.params]

    def optimizer(self, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
        if self._opt is None:
            self._opt = torch.optim.Adam([{"params": g.params, "lr": g.lr, "name": g.name} for g in self.trainable()],
                                         betas=betas, eps=eps)
        return self._opt

    def zero_grad(self) -> None:
        for g in self.groups.values():
            for p in g.params:
                p.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        """Flat gradient per trainable group; untouched parameters report 0."""
        out = {}
        for g in self.trainable():
            out[g.name] = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
                                     for p in g.params])
        return out

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: g.flat().clone() for n, g in self.groups.items()}


def backward(loss: torch.Tensor, store: ParamStore | None = None, terms: dict | None = None,
             step: int | None = None) -> None:
    """Reverse-mode pass; raises :class:`NumericError` naming the first non-finite term."""
    if terms:
        for name, v in terms.items():
            if isinstance(v, torch.Tensor) and not bool(torch.isfinite(v).all()):
                raise NumericError(name, step)
    if not bool(torch.isfinite(loss).all()):
        raise NumericError("total loss", step)
    loss.backward()
    if store is not None:
        for g in store.trainable():
            for p in g.params:
                if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                    raise NumericError(f"gradient of group {g.name!r}", step)


def adam_step(store: ParamStore) -> None:
    """Bias-corrected Adam update of every trainable group at its own learning rate."""
    store.optimizer().step()


# --------------------------------------------------------------------------
# losses


def _masked_mean(x: torch.Tensor, mask) -> torch.Tensor:
    if mask is None:
        return x.mean()
    m = torch.as_tensor(mask, dtype=x.dtype)
    while m.dim() < x.dim():
        m = m.unsqueeze(-1)
    m = m.expand_as(x)
    den = m.sum()
    if float(den) == 0.0:
        warnings.warn("empty mask in photometric loss; returning 0", RuntimeWarning, stacklevel=3)
        return (x * 0.0).sum()
    return (x * m).sum() / den


def loss_data(rendered: torch.Tensor, c_gt, mask=None) -> torch.Tensor:
    """Mean absolute error over masked pixels (all channels)."""
    c_gt = torch.as_tensor(c_gt, dtype=rendered.dtype)
    return _masked_mean((rendered - c_gt).abs(), mask)


def loss_cache(cache_out: torch.Tensor, c_gt, mask=None) -> torch.Tensor:
    """Same metric as :func:`loss_data`, applied to cache outputs along camera rays."""
    return loss_data(cache_out, c_gt, mask)


def loss_residual(cache_out: torch.Tensor, shaded: torch.Tensor) -> torch.Tensor:
    """Mean ``|R_k(p, d) - L_o(p, d)|`` over surface samples."""
    if cache_out.shape[0] == 0:
        raise ValueError("residual loss needs at least one surface sample")
    return (cache_out - shaded).abs().mean()


def loss_mask(alpha: torch.Tensor, gt_mask) -> torch.Tensor:
    gt = torch.as_tensor(gt_mask, dtype=alpha.dtype)
    a = alpha.clamp(1e-6, 1 - 1e-6)
    # exact zero on an exact binary match
    bce = F.binary_cross_entropy(a, gt, reduction="none")
    return torch.where((alpha == gt) & ((gt == 0) | (gt == 1)), torch.zeros_like(bce), bce).mean()


def edge_aware_smoothness(maps: torch.Tensor, image, mask=None) -> torch.Tensor:
    """Mean ``|grad map| * exp(-|grad image|)`` over horizontal and vertical neighbours.

    ``maps`` and ``image`` are ``(B, h, w, C)``; ``mask`` ``(B, h, w)`` restricts
    to neighbour pairs with both pixels inside.
    """
    image = torch.as_tensor(image, dtype=maps.dtype)
    if maps.dim() == 3:
        maps = maps[..., None]
    total = maps.new_zeros(())
    for ax in (1, 2):
        n = maps.shape[ax]
        if n < 2:
            continue
        dm = (maps.narrow(ax, 1, n - 1) - maps.narrow(ax, 0, n - 1)).abs().mean(-1)
        di = (image.narrow(ax, 1, n - 1) - image.narrow(ax, 0, n - 1)).abs().mean(-1)
        w = torch.exp(-di)
        m = None
        if mask is not None:
            mk = torch.as_tensor(mask, dtype=maps.dtype)
            m = mk.narrow(ax, 1, n - 1) * mk.narrow(ax, 0, n - 1)
        total = total + _masked_mean(dm * w, m)
    return total


def light_smoothness(radiance: torch.Tensor) -> torch.Tensor:
    """Mean squared horizontal plus vertical texel differences."""
    dh = radiance[:, 1:] - radiance[:, :-1]
    dv = radiance[1:] - radiance[:-1]
    return (dh * dh).mean() + (dv * dv).mean()


def light_whiteness(radiance: torch.Tensor) -> torch.Tensor:
    """Mean absolute deviation of each texel's channels from their mean."""
    return (radiance - radiance.mean(-1, keepdim=True)).abs().mean()


@dataclass
class LossReport:
    data: torch.Tensor | float = 0.0
    cache: torch.Tensor | float = 0.0
    residual: torch.Tensor | float = 0.0
    mask: torch.Tensor | float = 0.0
    albedo_smooth: torch.Tensor | float = 0.0
    light_smooth: torch.Tensor | float = 0.0
    rough_smooth: torch.Tensor | float = 0.0
    light_white: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    @staticmethod
    def combine(data, cache, residual, regs: dict, weights: dict = REG_WEIGHTS,
                lambda_residual: float = LAMBDA_RESIDUAL) -> "LossReport":
        """``total = data + cache + lambda_residual * residual + sum_i w_i * reg_i``."""
        total = data + cache + lambda_residual * residual
        for name in ("mask", "albedo_smooth", "rough_smooth", "light_smooth", "light_white"):
            total = total + weights[name] * regs.get(name, 0.0)
        return LossReport(data, cache, residual, regs.get("mask", 0.0), regs.get("albedo_smooth", 0.0),
                          regs.get("light_smooth", 0.0), regs.get("rough_smooth", 0.0), regs.get("light_white", 0.0),
                          total)

    def terms(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def floats(self) -> dict[str, float]:
        return {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in self.terms().items()}


class LossCsv:
    """Append-only CSV of ``step`` plus every :class:`LossReport` field."""

    COLUMNS = ["step"] + [f.name for f in fields(LossReport)]

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(self.COLUMNS)

    def write(self, step: int, report: LossReport) -> None:
        vals = report.floats()
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([step] + [repr(vals[c]) for c in self.COLUMNS[1:]])


def fd_gradient(fn, params: list[torch.Tensor], eps: float = 1e-6) -> list[torch.Tensor]:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``params``."""
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gf = g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                fp = float(fn())
                flat[i] = old - eps
                fm = float(fn())
                flat[i] = old
                gf[i] = (fp - fm) / (2 * eps)
            out.append(g)
    return out


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """``|a - b|_inf / max(|a|_inf, |b|_inf, tiny)``."""
    den = max(float(a.abs().max()), float(b.abs().max()), 1e-30)
    return float((a - b).abs().max()) / den
