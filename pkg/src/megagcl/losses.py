"""Contrastive and correlation losses over paired feature batches.

All functions take the original features z (N x D) and the augmented
features z' row-aligned with them, and stay on the tape end to end so the
meta step can differentiate through them.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, ShapeError


def _require_square(kind, m):
    if m.data.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(kind, [m.shape], "expected a square matrix")


def trace_sum(m):
    """tr(M) = sum_i M_ii."""
    _require_square("trace", m)
    eye = ad.constant(np.eye(m.shape[0]))
    return ad.reduce_sum(ad.mul(m, eye))


def offdiag_sum(m):
    """de(M) = sum_i sum_{j != i} M_ij."""
    _require_square("offdiag", m)
    return ad.sub(ad.reduce_sum(m), trace_sum(m))


def _check_pair(kind, z, z_aug):
    if z.data.ndim != 2 or z_aug.data.ndim != 2 or z.shape != z_aug.shape:
        raise ShapeError(kind, [z.shape, z_aug.shape],
                         "feature batches must be equal 2-D shapes")


def _check_nonzero_rows(kind, z, tag):
    norms = np.sqrt((z.data * z.data).sum(axis=1))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise NumericError(f"{kind}: zero-norm row {int(bad[0])} in {tag}")


def nt_xent(z, z_aug, tau):
    """Temperature-scaled contrastive loss, averaged over anchors.

    For anchor i the positive is (z_i, z'_i); the negatives are the pairs
    (z_i, z'_j) and (z'_i, z_j) for j != i. Similarity is cosine. With a
    single pair there are no negatives and the loss is exactly 0.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    _check_pair("nt-xent", z, z_aug)
    _check_nonzero_rows("nt-xent", z, "z")
    _check_nonzero_rows("nt-xent", z_aug, "z'")
    n = z.shape[0]
    sims = ad.matmul(ad.l2_normalize_rows(z),
                     ad.transpose(ad.l2_normalize_rows(z_aug)))
    scaled = ad.exp(ad.scalar_scale(sims, 1.0 / tau))
    eye = ad.constant(np.eye(n))
    ones = ad.constant(np.ones((n, 1)))
    row_tot = ad.matmul(scaled, ones)
    col_tot = ad.matmul(ad.transpose(scaled), ones)
    diag = ad.matmul(ad.mul(scaled, eye), ones)
    # positive + all 2(n-1) negatives of anchor i, counted once each
    denom = ad.sub(ad.add(row_tot, col_tot), diag)
    pos = ad.matmul(ad.mul(sims, eye), ones)
    per_anchor = ad.sub(ad.log(denom), ad.scalar_scale(pos, 1.0 / tau))
    return ad.reduce_mean(per_anchor)


def instance_corr(z, z_aug):
    """N x N matrix of cosine similarities between original and augmented
    features: C_ij = (z_i . z'_j) / (|z_i| |z'_j|)."""
    _check_pair("instance-corr", z, z_aug)
    _check_nonzero_rows("instance-corr", z, "z")
    _check_nonzero_rows("instance-corr", z_aug, "z'")
    return ad.matmul(ad.l2_normalize_rows(z),
                     ad.transpose(ad.l2_normalize_rows(z_aug)))


def feature_corr(z, z_aug):
    """Per-dimension correlation along the batch, uncentered:
    D_pq = sum_i z_ip z'_iq / (sqrt(sum_i z_ip^2) sqrt(sum_i z'_iq^2))."""
    _check_pair("feature-corr", z, z_aug)
    for tag, t in (("z", z), ("z'", z_aug)):
        norms = np.sqrt((t.data * t.data).sum(axis=0))
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise NumericError(
                f"feature-corr: zero-norm feature dimension {int(bad[0])} in {tag}")
    return ad.matmul(ad.l2_normalize_rows(ad.transpose(z)),
                     ad.transpose(ad.l2_normalize_rows(ad.transpose(z_aug))))


def mega_loss(inst, feat, lam):
    """Combined objective over the two correlation matrices.

    Minimizing the instance term tr(C) - de(C) pushes positives apart and
    distinct instances together: the hard-example direction. The feature
    term tr(elementwise (1-D)^2) + de(elementwise D^2) is zero exactly when
    D is the identity. ``lam`` balances the two.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    _require_square("mega-loss", inst)
    _require_square("mega-loss", feat)
    instance_term = ad.sub(trace_sum(inst), offdiag_sum(inst))
    eye = ad.constant(np.eye(feat.shape[0]))
    feature_term = ad.add(trace_sum(ad.square(ad.sub(eye, feat))),
                          offdiag_sum(ad.square(feat)))
    return ad.add(instance_term, ad.scalar_scale(feature_term, lam))
