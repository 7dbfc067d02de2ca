"""Scene-level semantic vectors: rotation calibration, aggregation and refinement.

A length-``C`` vector is viewed as a ``3 x C/3`` matrix whose columns are
consecutive triplets, so a camera rotation can act on it directly.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .geometry import ORTHO_TOL


class RefinementStateError(RuntimeError):
    pass


def unflatten(s: torch.Tensor) -> torch.Tensor:
    """``(..., C)`` -> ``(..., 3, C/3)``; column ``j`` is ``s[3j:3j+3]``."""
    c = s.shape[-1]
    if c % 3:
        raise ValueError(f"semantic length {c} is not divisible by 3")
    return s.reshape(*s.shape[:-1], c // 3, 3).transpose(-1, -2)


def flatten(m: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`unflatten`."""
    if m.shape[-2] != 3:
        raise ValueError(f"expected a (..., 3, C/3) matrix, got {tuple(m.shape)}")
    return m.transpose(-1, -2).reshape(*m.shape[:-2], -1)


def _check_rotation(rot: torch.Tensor) -> None:
    if rot.shape[-2:] != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {tuple(rot.shape)}")
    r = rot.detach().to(torch.float64)
    eye = torch.eye(3, dtype=torch.float64)
    err = (r.transpose(-1, -2) @ r - eye).abs().amax()
    det_err = (torch.linalg.det(r) - 1).abs().amax()
    if err > ORTHO_TOL or det_err > ORTHO_TOL:
        raise ValueError(f"rotation is not orthonormal (error {float(err):.3g}, det error {float(det_err):.3g})")


def calibrate(s: torch.Tensor, rot) -> torch.Tensor:
    """Rotate a semantic vector: ``flatten(rot @ unflatten(s))``.

    Batched over leading axes: ``s`` is ``(..., C)`` and ``rot`` ``(..., 3, 3)``.
    """
    rot = torch.as_tensor(rot, dtype=s.dtype)
    _check_rotation(rot)
    return flatten(rot @ unflatten(s))


def aggregate(per_view: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean over the view axis of ``(N, C)``."""
    if per_view.dim() != 2 or per_view.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, C) stack, got {tuple(per_view.shape)}")
    return per_view.mean(dim=0)


# the calibrated and uncalibrated scene vectors are the same mean, applied to different inputs
aggregate_calibrated = aggregate
aggregate_uncalibrated = aggregate


def concat_global_local(fused_pixel: torch.Tensor, semantic: torch.Tensor) -> torch.Tensor:
    """Pixel part first, semantic part last; ``semantic`` broadcasts over leading axes."""
    semantic = semantic.expand(*fused_pixel.shape[:-1], semantic.shape[-1])
    return torch.cat([fused_pixel, semantic], dim=-1)


def central_loss(per_view: torch.Tensor, center: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over views of the L1 distance to the view average."""
    if per_view.dim() != 2 or per_view.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, C) stack, got {tuple(per_view.shape)}")
    if center is None:
        center = aggregate(per_view)
    return (per_view - center).abs().sum(dim=-1).mean()


class CrossAttentionRefiner(nn.Module):
    """One refinement stage: the current scene vector attends over the per-view vectors.

    ``delta = W_o . MHA(query = current, keys/values = per_view)``.  With
    ``mode="per_view_sum"`` each view is attended separately (a single key,
    so its weight is one) and the results are summed instead.
    """

    def __init__(self, dim: int, heads: int = 4, mode: str = "joint"):
        super().__init__()
        if dim % heads:
            raise ValueError(f"semantic length {dim} not divisible by {heads} heads")
        if mode not in ("joint", "per_view_sum"):
            raise ValueError(f"unknown refinement attention mode {mode!r}")
        self.heads = heads
        self.mode = mode
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def attend(self, current: torch.Tensor, per_view: torch.Tensor) -> torch.Tensor:
        if self.mode == "per_view_sum":
            return self.v(per_view).sum(dim=0)
        h = self.heads
        dh = current.shape[-1] // h
        q = self.q(current).reshape(h, dh)
        k = self.k(per_view).reshape(-1, h, dh)
        v = self.v(per_view).reshape(-1, h, dh)
        logits = torch.einsum("hd,nhd->hn", q, k) / dh**0.5
        w = torch.softmax(logits, dim=-1)
        return torch.einsum("hn,nhd->hd", w, v).reshape(-1)

    def forward(self, current: torch.Tensor, per_view: torch.Tensor) -> torch.Tensor:
        return self.out(self.attend(current, per_view))


class SemanticRefiner(nn.Module):
    """Independent refiners between consecutive stages (``stages - 1`` of them)."""

    def __init__(self, dim: int, stages: int, heads: int = 4, mode: str = "joint"):
        super().__init__()
        self.blocks = nn.ModuleList(CrossAttentionRefiner(dim, heads, mode) for _ in range(max(stages - 1, 0)))

    def stage_vectors(self, initial: torch.Tensor, originals: torch.Tensor) -> list:
        """``[S^(0), ..., S^(K-1)]`` obtained by repeated residual updates."""
        state = RefinementState(0, initial, originals, self)
        out = [initial]
        while state.stage < len(self.blocks):
            state = refine_step(state)
            out.append(state.current)
        return out


class RefinementState:
    """Stage index, current scene vector, the untouched per-view vectors and the block stack."""

    __slots__ = ("stage", "current", "originals", "refiner")

    def __init__(self, stage: int, current: torch.Tensor, originals: torch.Tensor, refiner: SemanticRefiner):
        self.stage = stage
        self.current = current
        self.originals = originals
        self.refiner = refiner


def refine_step(state: RefinementState) -> RefinementState:
    """Advance one stage: ``current + delta`` with delta from cross-attention."""
    if state.stage >= len(state.refiner.blocks):
        raise RefinementStateError(
            f"stage {state.stage} has no refinement block ({len(state.refiner.blocks)} blocks)"
        )
    block = state.refiner.blocks[state.stage]
    delta = block(state.current, state.originals)
    return RefinementState(state.stage + 1, state.current + delta, state.originals, state.refiner)
