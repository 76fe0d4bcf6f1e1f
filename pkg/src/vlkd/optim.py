"""AdamW with decoupled weight decay, plus a NaN-gradient guard."""

from __future__ import annotations

import torch


class NanGradientError(RuntimeError):
    """A parameter received a non-finite gradient; the step was not applied."""


class AdamW(torch.optim.Optimizer):
    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    name = getattr(p, "_vlkd_name", f"tensor{tuple(p.shape)}")
                    raise NanGradientError(f"non-finite gradient for parameter {name}")
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]

                # decoupled decay, applied before the Adam descent term
                if group["weight_decay"] != 0:
                    p.mul_(1 - group["lr"] * group["weight_decay"])

                exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                bias1 = 1 - beta1 ** t
                bias2 = 1 - beta2 ** t
                denom = (exp_avg_sq / bias2).sqrt().add_(group["eps"])
                p.addcdiv_(exp_avg / bias1, denom, value=-group["lr"])
        return loss


def name_parameters(module: torch.nn.Module) -> None:
    """Tag parameters with their dotted names so NaN diagnostics can cite them."""
    for name, p in module.named_parameters():
        p._vlkd_name = name


def clip_grad_norm(params, max_norm: float = 1.0) -> float:
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))
