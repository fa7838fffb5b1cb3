"""Alternating bilevel training.

Even iterations train the encoder and projection head by backpropagating the
contrastive loss through a frozen augmenter; odd iterations train the
augmenter by differentiating the combined correlation objective through a
one-step virtual update of the encoder (gradients of gradients on the tape).
One iteration is one batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import augmenter as lga
from . import gnn
from . import losses
from .errors import ConfigError, NumericError
from .graphdata import Dataset, batch_graphs

TRAINING_MODES = ("mega", "mega-il", "ccl")


@dataclass
class Hyperparams:
    tau: float = 0.5
    lam: float = 0.1
    inner_lr: float = 1e-3      # virtual-step rate shared by encoder and head
    encoder_lr: float = 1e-3
    augmenter_lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("tau", "encoder_lr", "augmenter_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.inner_lr < 0 or self.lam < 0:
            raise ConfigError("inner_lr and lam must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


@dataclass
class TrainState:
    phi: gnn.EncoderParams
    psi: gnn.ProjectionParams
    sigma: lga.AugmenterParams
    enc_opt: ad.AdamState
    aug_opt: ad.AdamState
    iteration: int = 0

    def all_tensors(self):
        return (self.phi.tensors() + self.psi.tensors()
                + self.sigma.tensors())

    def adopt_all(self, tape: ad.Tape):
        for t in self.all_tensors():
            tape.adopt(t)


def init_train_state(dims: gnn.ModelDims, seed) -> TrainState:
    phi, psi, sigma = gnn.init_params(dims, seed)
    return TrainState(phi, psi, sigma, ad.AdamState(), ad.AdamState())


def _encode_project(batch, weights, phi, psi):
    return gnn.project(gnn.readout(batch, gnn.encode(batch, weights, phi)),
                       psi)


def _split_encoder_tensors(phi, tensors):
    n_phi = len(phi.tensors())
    return (gnn.EncoderParams.from_tensors(tensors[:n_phi]),
            gnn.MlpParams.from_tensors(tensors[n_phi:]))


def _require_finite(value, what, iteration):
    if not np.isfinite(value):
        raise NumericError(f"{what} is not finite at iteration {iteration}: "
                           f"{value}")


def contrast_step(state: TrainState, batch, hp: Hyperparams,
                  unit_weights=False):
    """Adam-update the encoder and head on the contrastive loss.

    The augmenter drives the second view but is treated as a constant
    (detached weights); it is bitwise untouched by this step.
    """
    tape = ad.active_tape()
    with tape.paused():
        weights = lga.unit_edge_weights(batch) if unit_weights \
            else lga.lga_edge_weights(batch, state.sigma)
    weights = ad.detach(weights)
    z = _encode_project(batch, lga.unit_edge_weights(batch), state.phi,
                        state.psi)
    z_aug = _encode_project(batch, weights, state.phi, state.psi)
    loss = losses.nt_xent(z, z_aug, hp.tau)
    _require_finite(loss.item(), "contrastive loss", state.iteration)

    enc_tensors = state.phi.tensors() + state.psi.tensors()
    grads = ad.backward(loss, enc_tensors)
    new_tensors, state.enc_opt = ad.adam_step(enc_tensors, grads,
                                              state.enc_opt, hp.encoder_lr)
    state.phi, state.psi = _split_encoder_tensors(state.phi, new_tensors)

    with tape.paused():
        c = losses.instance_corr(ad.detach(z), ad.detach(z_aug))
        d = losses.feature_corr(ad.detach(z), ad.detach(z_aug))
        record = {
            "step": "contrast",
            "l_contrast": loss.item(),
            "tr_c": losses.trace_sum(c).item(),
            "de_c": losses.offdiag_sum(c).item(),
            "feature_term": _feature_term_value(d),
        }
        record["l_mega"] = losses.mega_loss(c, d, hp.lam).item()
    return record


def _feature_term_value(d):
    eye = ad.constant(np.eye(d.shape[0]))
    return ad.add(losses.trace_sum(ad.square(ad.sub(eye, d))),
                  losses.offdiag_sum(ad.square(d))).item()


def meta_gradients(phi, psi, sigma, batch, hp: Hyperparams, iteration=0):
    """Gradient of the meta objective with respect to the augmenter.

    Pipeline: (1) score edge weights with sigma on the tape; (2) contrastive
    loss under the current encoder/head; (3) differentiable gradients of that
    loss give one virtual SGD step for encoder and head; (4) re-encode the
    original view and the stop-gradient augmented view under the virtual
    parameters; (5) the correlation objective there is differentiated back
    through (3)'s gradients into sigma.
    """
    weights = lga.lga_edge_weights(batch, sigma)
    z = _encode_project(batch, lga.unit_edge_weights(batch), phi, psi)
    z_aug = _encode_project(batch, weights, phi, psi)
    l_contrast = losses.nt_xent(z, z_aug, hp.tau)
    _require_finite(l_contrast.item(), "contrastive loss", iteration)

    enc_tensors = phi.tensors() + psi.tensors()
    enc_grads = ad.backward(l_contrast, enc_tensors, create_graph=True)
    virtual = ad.sgd_virtual_step(enc_tensors, enc_grads, hp.inner_lr)
    phi_v, psi_v = _split_encoder_tensors(phi, virtual)

    hat_weights = ad.detach(weights)
    z_meta = _encode_project(batch, lga.unit_edge_weights(batch), phi_v, psi_v)
    z_aug_meta = _encode_project(batch, hat_weights, phi_v, psi_v)
    c = losses.instance_corr(z_meta, z_aug_meta)
    d = losses.feature_corr(z_meta, z_aug_meta)
    l_mega = losses.mega_loss(c, d, hp.lam)
    _require_finite(l_mega.item(), "meta objective", iteration)

    sigma_tensors = sigma.tensors()
    grads = ad.backward(l_mega, sigma_tensors)
    norms = [float(np.linalg.norm(grads[t].data)) for t in sigma_tensors]
    if not all(np.isfinite(norms)):
        raise NumericError(
            f"non-finite meta-gradient at iteration {iteration}; "
            f"gradient norms {norms}")
    record = {
        "step": "meta",
        "l_contrast": l_contrast.item(),
        "l_mega": l_mega.item(),
        "tr_c": losses.trace_sum(c).item(),
        "de_c": losses.offdiag_sum(c).item(),
        "feature_term": _feature_term_value(ad.detach(d)),
    }
    return grads, record


def meta_step(state: TrainState, batch, hp: Hyperparams):
    """Adam-update the augmenter on the meta objective; the encoder and head
    are bitwise untouched."""
    grads, record = meta_gradients(state.phi, state.psi, state.sigma, batch,
                                   hp, state.iteration)
    sigma_tensors = state.sigma.tensors()
    new_sigma, state.aug_opt = ad.adam_step(sigma_tensors, grads,
                                            state.aug_opt, hp.augmenter_lr)
    state.sigma = lga.AugmenterParams.from_tensors(new_sigma)
    return record


def _iter_batches(dataset, rng, batch_size):
    order = rng.permutation(len(dataset.records))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            continue  # the contrastive loss needs at least one negative
        yield [dataset.records[i] for i in chunk]


def train(dataset: Dataset, hp: Hyperparams, dims: gnn.ModelDims = None,
          mode="mega"):
    """Run the alternating schedule for the configured number of epochs.

    Modes: ``mega`` alternates contrast and meta steps strictly 1:1;
    ``mega-il`` is the same with the feature term off (lam = 0); ``ccl``
    takes a contrast step with unit weights on every batch (the plain
    contrastive baseline). Returns the final TrainState (its ``phi`` is the
    encoder; head and augmenter ride along) and the metrics log.
    """
    if mode not in TRAINING_MODES:
        raise ConfigError(f"unknown training mode: {mode!r}")
    if not dataset.records:
        raise ConfigError("cannot train on an empty dataset")
    if dataset.feature_width is None:
        raise ConfigError("dataset needs node features before training")
    if hp.batch_size < 2:
        raise ConfigError("batch size must be at least 2 "
                          "(the contrastive loss needs negatives)")
    if mode == "mega-il":
        hp = replace(hp, lam=0.0)

    dims = dims or gnn.ModelDims(feature_dim=dataset.feature_width)
    state = init_train_state(dims, hp.seed)
    rng = np.random.default_rng(hp.seed)
    log = MetricsLog()

    tape = ad.Tape()
    with ad.use_tape(tape):
        for epoch in range(hp.epochs):
            for records in _iter_batches(dataset, rng, hp.batch_size):
                tape.reset()
                state.adopt_all(tape)
                batch = batch_graphs(records)
                if mode == "ccl" or state.iteration % 2 == 0:
                    record = contrast_step(state, batch, hp,
                                           unit_weights=(mode == "ccl"))
                else:
                    record = meta_step(state, batch, hp)
                record.update(iteration=state.iteration, epoch=epoch,
                              n_graphs=batch.n_graphs)
                log.records.append(record)
                state.iteration += 1

    last = log.records[-1] if log.records else {}
    log.summary = {
        "mode": mode,
        "seed": hp.seed,
        "epochs": hp.epochs,
        "iterations": state.iteration,
        "final_l_contrast": last.get("l_contrast"),
        "final_l_mega": last.get("l_mega"),
    }
    return state, log
