"""Reconstruction and margin losses with the asymmetric gradient routing.

The margin loss never touches the decoder: its graph ends at the
encoder, so one backward pass over `margin_weight * margin + reconstruction`
gives the encoder the sum of both gradients while the decoder sees the
reconstruction term alone.
"""

from dataclasses import dataclass

import torch

from .errors import InvalidInputError


@dataclass
class LossReport:
    margin_loss: float
    reconstruction_loss: float
    total_encoder_loss: float
    d_close: float
    d_similar: float
    d_negative: float


def _min_sq_to(src, dst, chunk):
    """Per point of `src`, squared distance to the nearest point of `dst`; (B, N)."""
    mins = []
    for start in range(0, src.shape[1], chunk):
        block = src[:, start : start + chunk]
        diff = block.unsqueeze(2) - dst.unsqueeze(1)  # (B, c, M, 3)
        sq = (diff * diff).sum(dim=3)
        mins.append(sq.min(dim=2).values)
    return torch.cat(mins, dim=1)


def chamfer_loss(a, b, chunk=256):
    """Differentiable two-sided mean chamfer distance per batch item; (B,).

    Same definition as geometry.chamfer_distance, chunked to bound the
    (B, chunk, M, 3) intermediate.
    """
    if a.ndim == 2:
        a = a.unsqueeze(0)
    if b.ndim == 2:
        b = b.unsqueeze(0)
    if a.ndim != 3 or b.ndim != 3 or a.shape[-1] != 3 or b.shape[-1] != 3:
        raise InvalidInputError(f"chamfer_loss expects (B, N, 3) clouds, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] != b.shape[0]:
        raise InvalidInputError(f"batch mismatch: {a.shape[0]} vs {b.shape[0]}")
    return _min_sq_to(a, b, chunk).mean(dim=1) + _min_sq_to(b, a, chunk).mean(dim=1)


def reconstruction_loss(original, reconstructed, chunk=256):
    """Mean chamfer loss over the batch (scalar tensor)."""
    return chamfer_loss(original, reconstructed, chunk=chunk).mean()


def margin_loss(e_anchor, e_close, e_similar, e_negative, alpha):
    """Context margin loss on unit embeddings.

    d_x = ||e_anchor - e_x||^2, loss = max{(d_close + d_similar)/2 - d_negative + alpha, 0}.
    Batched inputs give per-item losses. Returns (loss, d_close, d_similar, d_negative).
    """
    dims = {e.shape[-1] for e in (e_anchor, e_close, e_similar, e_negative)}
    if len(dims) != 1:
        raise InvalidInputError(f"embedding dimensions differ: {sorted(dims)}")
    d_close = ((e_anchor - e_close) ** 2).sum(dim=-1)
    d_similar = ((e_anchor - e_similar) ** 2).sum(dim=-1)
    d_negative = ((e_anchor - e_negative) ** 2).sum(dim=-1)
    loss = torch.clamp((d_close + d_similar) / 2.0 - d_negative + alpha, min=0.0)
    return loss, d_close, d_similar, d_negative


def combined_step_losses(model, anchor, close, similar, negative, alpha, margin_weight,
                         reconstruction_weight=1.0, reconstruct_all=False, chunk=256):
    """One training step's losses over a quadruple batch.

    Returns (total, report): `total` is the tensor to backpropagate,
    `margin_weight * margin + reconstruction_weight * reconstruction`. The
    anchor is encoded first so the reconstruction sub-graph is unaffected
    by the other passes. Only the anchor is reconstructed unless
    `reconstruct_all` is set.
    """
    e_anchor = model.encode(anchor)
    recon = model.decode(e_anchor)
    rec = chamfer_loss(anchor, recon, chunk=chunk)

    e_close = model.encode(close)
    e_similar = model.encode(similar)
    e_negative = model.encode(negative)
    if reconstruct_all:
        for cloud, e in ((close, e_close), (similar, e_similar), (negative, e_negative)):
            rec = rec + chamfer_loss(cloud, model.decode(e), chunk=chunk)
        rec = rec / 4.0
    rec = rec.mean()

    m, d_c, d_s, d_n = margin_loss(e_anchor, e_close, e_similar, e_negative, alpha)
    m = m.mean()

    total = margin_weight * m + reconstruction_weight * rec
    report = LossReport(
        margin_loss=float(m.detach()),
        reconstruction_loss=float(rec.detach()),
        total_encoder_loss=float(total.detach()),
        d_close=float(d_c.detach().mean()),
        d_similar=float(d_s.detach().mean()),
        d_negative=float(d_n.detach().mean()),
    )
    return total, report
