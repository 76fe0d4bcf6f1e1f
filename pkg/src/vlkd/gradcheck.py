"""Finite-difference gradient checking for every loss in the pipeline.

All checks run in float64 with central differences (step 1e-5) and compare
against autograd. Relative error is measured per tensor against the larger
of the two gradients' max-magnitudes, so near-zero components don't inflate
the ratio with finite-difference noise.
"""

from __future__ import annotations

import zlib

import torch

from .kd_losses import (CRDState, crd_loss, l2_regression_loss, nst_mmd2,
                        soft_label_loss, voken_loss)
from .teacher_losses import contrastive_hinge_loss, mlm_loss

FD_STEP = 1e-5


def fd_grad(f, x: torch.Tensor, eps: float = FD_STEP) -> torch.Tensor:
    """Central finite differences of scalar f w.r.t. every entry of x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = float(f())
        flat[i] = orig - eps
        f_minus = float(f())
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * eps)
    return g


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-8)
    return (analytic - numeric).abs().max().item() / scale


def check_inputs(make_loss, inputs: dict) -> float:
    """Max relative error over the given leaf tensors for one loss instance."""
    for t in inputs.values():
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = make_loss()
    loss.backward()
    worst = 0.0
    for t in inputs.values():
        with torch.no_grad():
            num = fd_grad(lambda: make_loss(), t)
        worst = max(worst, relative_error(t.grad, num))
    return worst


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def check_contrastive(g, d=6, lx=4, margin=1.0) -> float:
    """Hinge loss gradcheck; instances resampled away from hinge kinks."""
    for _ in range(200):
        h_x = _randn(g, lx, d)
        h_neg = _randn(g, lx, d)
        v = _randn(g, d)
        v_neg = _randn(g, d)
        with torch.no_grad():
            cos = torch.nn.functional.cosine_similarity
            pos = cos(h_x, v[None], dim=-1)
            a1 = margin - pos + cos(h_neg, v[None], dim=-1)
            a2 = margin - pos + cos(h_x, v_neg[None], dim=-1)
            if a1.abs().min() > 1e-3 and a2.abs().min() > 1e-3:
                break
    inputs = {"h_x": h_x, "h_neg": h_neg, "v": v, "v_neg": v_neg}
    return check_inputs(
        lambda: contrastive_hinge_loss(h_x, h_neg, v, v_neg, margin), inputs)


def check_mlm(g, L=5, z=7) -> float:
    logits = _randn(g, L, z)
    positions = (1, 3)
    originals = (2, 5)
    return check_inputs(lambda: mlm_loss(logits, positions, originals),
                        {"logits": logits})


def check_soft_label(g, L=4, z=6, tau=2.0) -> float:
    t_logits = _randn(g, L, z)
    s_logits = _randn(g, L, z)
    return check_inputs(lambda: soft_label_loss(t_logits, s_logits, tau),
                        {"s_logits": s_logits})


def check_l2(g, L=4, d=6) -> float:
    s = _randn(g, L, d)
    t = _randn(g, L, d)
    return check_inputs(lambda: l2_regression_loss(s, t), {"s": s})


def check_nst(g, L=3, d=5, sigma=1.0) -> float:
    s = _randn(g, L, d)
    t = _randn(g, L, d)
    return check_inputs(lambda: nst_mmd2(s, t, sigma, normalize=True), {"s": s})


def check_crd(g, L=3, d=6, m=12, n=3) -> float:
    state = CRDState(d, m, d_proj=4, seed=int(torch.randint(0, 10_000, (1,), generator=g)))
    state.double()
    s = _randn(g, L, d)
    t = _randn(g, L, d)
    neg = torch.randperm(m - 1, generator=g)[:n] + 1  # sample_index 0 excluded
    inputs = {"s": s, "t": t, "f1": state.f1.weight, "f2": state.f2.weight}
    return check_inputs(
        lambda: crd_loss(s, t, 0, state, n, neg_indices=neg), inputs)


def check_voken(g, L=4, k=9) -> float:
    logits = _randn(g, L, k)
    assignment = torch.randint(0, k, (L,), generator=g)
    return check_inputs(lambda: voken_loss(logits, assignment), {"logits": logits})


LOSS_CHECKS = {
    "contrastive_hinge": check_contrastive,
    "mlm": check_mlm,
    "soft_label": check_soft_label,
    "l2_regression": check_l2,
    "nst_mmd2": check_nst,
    "crd": check_crd,
    "voken": check_voken,
}


def run_all(seed: int = 0, n_instances: int = 20) -> dict:
    """Max relative error per loss over `n_instances` random small instances."""
    results = {}
    for name, check in LOSS_CHECKS.items():
        g = torch.Generator().manual_seed(seed * 7919 + zlib.crc32(name.encode()))
        results[name] = max(check(g) for _ in range(n_instances))
    return results


def check_encoder_params(model, ids, mask, entries_per_tensor: int = 4,
                         seed: int = 0) -> float:
    """FD check of a random linear probe of the outputs on sampled entries.

    A plain sum is degenerate for a post-LN encoder (normalized activations
    sum to zero under unit LN weights), so the probe uses fixed random
    weights over the output entries.
    """
    model = model.double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        weights = torch.randn(model(ids, mask).shape, generator=g,
                              dtype=torch.float64)

    def probe():
        return (model(ids, mask) * weights).sum()

    loss = probe()
    model.zero_grad()
    loss.backward()
    worst = 0.0
    for name, p in model.named_parameters():
        if p.grad is None:  # parameter not used by this forward (e.g. heads)
            continue
        flat = p.detach().reshape(-1)
        gflat = p.grad.reshape(-1)
        scale = max(gflat.abs().max().item(), 1e-8)
        picks = torch.randperm(flat.numel(), generator=g)[:entries_per_tensor]
        for i in picks.tolist():
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + FD_STEP
                f_plus = float(probe())
                flat[i] = orig - FD_STEP
                f_minus = float(probe())
                flat[i] = orig
            num = (f_plus - f_minus) / (2 * FD_STEP)
            scale_i = max(scale, abs(num))
            worst = max(worst, abs(gflat[i].item() - num) / scale_i)
    return worst
