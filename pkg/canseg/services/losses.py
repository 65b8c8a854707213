"""OHEM cross entropy and the joint three-head segmentation loss."""

import logging
from typing import Tuple

import numpy as np

from canseg.core.errors import ShapeError
from canseg.models.schemas import LossReport, OhemConfig
from canseg.nn.can import ForwardOutput
from canseg.tensor import ops
from canseg.tensor.tensor import Tensor

logger = logging.getLogger(__name__)


def ohem_mask(ce: np.ndarray, valid: np.ndarray, cfg: OhemConfig) -> np.ndarray:
    """Boolean mask of kept pixels given per-pixel CE values (N, H, W).

    Pixels whose true-class probability is below the threshold are hard and
    kept; when fewer than `min_kept` are hard, the `min_kept` lowest-probability
    valid pixels are kept instead.
    """
    n_valid = int(valid.sum())
    if n_valid == 0:
        return np.zeros_like(valid)
    min_kept = cfg.min_kept if cfg.min_kept is not None else max(1, n_valid // 16)
    min_kept = min(min_kept, n_valid)
    prob = np.exp(-ce.astype(np.float64))
    hard = valid & (prob < cfg.prob_threshold)
    if int(hard.sum()) >= min_kept:
        return hard
    flat_valid = np.flatnonzero(valid)
    order = np.argsort(prob.reshape(-1)[flat_valid], kind="stable")
    keep = np.zeros(valid.size, dtype=bool)
    keep[flat_valid[order[:min_kept]]] = True
    return keep.reshape(valid.shape)


def ohem_ce(logits: Tensor, labels: np.ndarray, cfg: OhemConfig) -> Tuple[Tensor, int]:
    """Mean cross entropy over the hardest pixels; returns (scalar loss, kept pixel count)."""
    labels = np.asarray(labels)
    ce = ops.pixel_cross_entropy(logits, labels, cfg.ignore_index)
    valid = labels != cfg.ignore_index
    keep = ohem_mask(ce.data[:, 0], valid, cfg)
    kept = int(keep.sum())
    if kept == 0:
        return ops.scale(ops.sum(ce), 0.0), 0
    mask = Tensor(keep[:, None].astype(ce.data.dtype))
    loss = ops.scale(ops.sum(ops.mul(ce, mask)), 1.0 / kept)
    return loss, kept


def downsample_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour label resize sampling pixel centres: row i reads floor((i + 0.5) * H / h)."""
    labels = np.asarray(labels)
    H, W = labels.shape[-2:]
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    return labels[..., rows[:, None], cols[None, :]]


def joint_loss(out: ForwardOutput, labels: np.ndarray, cfg: OhemConfig) -> Tuple[Tensor, LossReport]:
    """l_p + l_c1 + l_c2 with unit weights; aux terms see labels resized to their grid."""
    if out.aux_ga_logits is None or out.aux_la_logits is None:
        raise ShapeError("joint_loss needs train-mode output with both auxiliary heads")
    labels = np.asarray(labels)
    l_p, k_p = ohem_ce(out.primary_logits, labels, cfg)
    h, w = out.aux_ga_logits.shape[2:]
    small = downsample_labels(labels, h, w)
    l_c1, k_c1 = ohem_ce(out.aux_ga_logits, small, cfg)
    l_c2, k_c2 = ohem_ce(out.aux_la_logits, small, cfg)
    total = ops.add(ops.add(l_p, l_c1), l_c2)
    p, c1, c2 = l_p.item(), l_c1.item(), l_c2.item()
    report = LossReport(
        l_p=p,
        l_c1=c1,
        l_c2=c2,
        total=p + c1 + c2,
        kept_pixels={"l_p": k_p, "l_c1": k_c1, "l_c2": k_c2},
    )
    return total, report
