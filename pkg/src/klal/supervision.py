"""Attention supervision: visual-attention distributions, NTP, KLAL, total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from . import vocab
from .dataset import Sample, TokenLayout
from .tensor import Tensor


@dataclass
class Batch:
    """Teacher-forced arrays for a list of samples (right-padded with PAD)."""

    inputs: np.ndarray  # (B, N) token ids fed to the model
    targets: np.ndarray  # (B, N) next-token ids
    mask: np.ndarray  # (B, N) True where the target is an answer token
    images: np.ndarray  # (B, H, W, 3) uint8
    anchors: np.ndarray  # (B,) query row supervised by KLAL
    gt: np.ndarray  # (B, n_visual)
    visual_start: int
    visual_len: int

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> Batch:
        layouts = [s.layout for s in samples]
        vs = {lay.visual_start for lay in layouts}
        vl = {lay.visual_len for lay in layouts}
        if len(vs) != 1 or len(vl) != 1:
            raise ValueError("all samples in a batch must share the visual span")
        n = max(len(lay) for lay in layouts) - 1
        inputs = np.full((len(samples), n), vocab.PAD, dtype=np.int64)
        targets = np.full((len(samples), n), vocab.PAD, dtype=np.int64)
        mask = np.zeros((len(samples), n), dtype=bool)
        for i, lay in enumerate(layouts):
            tok = lay.tokens()
            inputs[i, : len(tok) - 1] = tok[:-1]
            targets[i, : len(tok) - 1] = tok[1:]
            mask[i] = answer_mask(lay, n)
        return cls(
            inputs=inputs,
            targets=targets,
            mask=mask,
            images=np.stack([s.image.array() for s in samples]),
            anchors=np.array([lay.anchor for lay in layouts]),
            gt=np.stack([s.gt_array() for s in samples]),
            visual_start=vs.pop(),
            visual_len=vl.pop(),
        )


def answer_mask(layout: TokenLayout, length: int | None = None) -> np.ndarray:
    """True at positions whose next-token target lies in the answer span."""
    length = len(layout) - 1 if length is None else length
    pos = np.arange(length)
    return (pos >= layout.prefix_len - 1) & (pos < len(layout) - 1)


@dataclass(frozen=True)
class LossBreakdown:
    ntp: float
    klal: float
    total: float
    lam: float


def extract_visual_attention(attentions: Sequence[Tensor], visual_start: int, visual_len: int, anchors) -> Tensor:
    """Per-layer head-averaged attention of the anchor row over the visual span.

    ``attentions`` holds one (B, H, N, N) tensor per layer.  For each layer and
    head the anchor row is cut to the visual columns and renormalised; the
    heads are then averaged.  Returns a (B, L, visual_len) tensor.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    if np.any(anchors < visual_start + visual_len):
        raise ValueError("anchor must come after the visual span")
    rows = np.arange(len(anchors))
    per_layer = []
    for attn in attentions:
        b, h = attn.shape[:2]
        alpha = T.getitem(attn, (rows, slice(None), anchors, slice(visual_start, visual_start + visual_len)))
        mass = alpha.sum(axis=-1, keepdims=True)
        if np.any(mass.data <= 0):
            raise FloatingPointError("a head puts zero attention on the visual span")
        q = (alpha / mass).mean(axis=1)
        per_layer.append(q.reshape(b, 1, visual_len))
    return T.concat(per_layer, axis=1)


def ntp_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Mean negative log-likelihood of the answer tokens (teacher forcing)."""
    return T.cross_entropy_logits(logits, batch.targets, batch.mask)


def klal_loss(q: Tensor, p, layers: Sequence[int] | None = None) -> Tensor:
    """Mean over layers (and batch) of KL(p || q_layer).

    ``q`` is (B, L, n) or (L, n); ``p`` is (B, n) or (n,).
    """
    p = np.asarray(p, dtype=q.dtype)
    if layers is not None:
        q = T.getitem(q, (Ellipsis, np.asarray(layers), slice(None)))
    kl = T.kl_divergence(np.expand_dims(p, -2), q)
    return kl.mean()


def total_loss(output, batch: Batch, lam: float = 1.0, layers: Sequence[int] | None = None) -> tuple[Tensor, LossBreakdown]:
    """NTP + lam * KLAL.

    With ``lam == 0`` the attention term is evaluated for logging only and
    stays out of the graph, so the update is identical to plain NTP.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ntp = ntp_loss(output.logits, batch)
    if lam == 0:
        with T.no_grad():
            klal = klal_loss(extract_visual_attention(output.attentions, batch.visual_start, batch.visual_len, batch.anchors), batch.gt, layers)
        total = ntp
    else:
        q = extract_visual_attention(output.attentions, batch.visual_start, batch.visual_len, batch.anchors)
        klal = klal_loss(q, batch.gt, layers)
        total = ntp + T.scale(klal, lam)
    breakdown = LossBreakdown(ntp.item(), klal.item(), ntp.item() + lam * klal.item(), lam)
    return total, breakdown
