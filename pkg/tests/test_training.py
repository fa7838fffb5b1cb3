import numpy as np
import pytest

from megagcl import autodiff as ad
from megagcl import augmenter as lga
from megagcl import gnn
from megagcl import graphdata as gd
from megagcl import losses
from megagcl import training as tr
from megagcl.errors import ConfigError, NumericError

from conftest import ring_record, synthetic_dataset


def tiny_fixture():
    """Two graphs, two nodes each: the smallest batch with negatives."""
    recs = []
    feats = [np.array([[1.0, 0.2], [0.1, -0.6]]),
             np.array([[-0.4, 0.9], [0.7, 0.3]])]
    for i in range(2):
        topo = gd.GraphTopology(2, ((0, 1), (1, 0)))
        recs.append(gd.GraphRecord(topo, i, features=feats[i]))
    ds = gd.Dataset("TINY", recs, 2, feature_scheme="raw")
    return ds, gd.batch_graphs(recs)


def small_dims(width):
    return gnn.ModelDims(feature_dim=width, hidden=3, layers=2, proj_dim=3,
                         aug_hidden=3)


def fresh_state(dims, seed=0):
    return tr.init_train_state(dims, seed)


def hp(**kw):
    base = dict(tau=0.5, lam=0.1, inner_lr=1e-3, encoder_lr=1e-3,
                augmenter_lr=1e-4, epochs=1, batch_size=4, seed=0)
    base.update(kw)
    return tr.Hyperparams(**base)


def param_bytes(params):
    return [t.data.tobytes() for t in params.tensors()]


# ---------------------------------------------------------------------------
# contrast step
# ---------------------------------------------------------------------------

def test_contrast_step_freezes_sigma_updates_encoder():
    ds, batch = tiny_fixture()
    state = fresh_state(small_dims(2))
    sigma_before = param_bytes(state.sigma)
    phi_before = param_bytes(state.phi)
    tape = ad.Tape()
    with ad.use_tape(tape):
        state.adopt_all(tape)
        record = tr.contrast_step(state, batch, hp())
    assert param_bytes(state.sigma) == sigma_before
    assert param_bytes(state.phi) != phi_before
    assert np.isfinite(record["l_contrast"])
    assert {"l_contrast", "l_mega", "tr_c", "de_c", "feature_term"} <= set(record)


def test_contrast_loss_decreases_over_20_steps():
    ds = synthetic_dataset(n_per_class=6, seed=2)
    state = fresh_state(small_dims(ds.feature_width), seed=1)
    batch = gd.batch_graphs(ds.records)
    values = []
    tape = ad.Tape()
    with ad.use_tape(tape):
        for _ in range(21):
            tape.reset()
            state.adopt_all(tape)
            values.append(tr.contrast_step(state, batch, hp())["l_contrast"])
    drops = sum(1 for a, b in zip(values, values[1:]) if b < a)
    assert drops >= 15, values


def test_ccl_mode_is_plain_contrastive_training():
    ds = synthetic_dataset(n_per_class=4, seed=3)
    _, log = tr.train(ds, hp(epochs=2, batch_size=8), mode="ccl")
    assert all(r["step"] == "contrast" for r in log.records)


# ---------------------------------------------------------------------------
# meta step
# ---------------------------------------------------------------------------

def test_meta_step_updates_sigma_only():
    ds, batch = tiny_fixture()
    state = fresh_state(small_dims(2))
    phi_before = param_bytes(state.phi)
    psi_before = param_bytes(state.psi)
    sigma_before = param_bytes(state.sigma)
    tape = ad.Tape()
    with ad.use_tape(tape):
        state.adopt_all(tape)
        record = tr.meta_step(state, batch, hp())
    assert param_bytes(state.phi) == phi_before
    assert param_bytes(state.psi) == psi_before
    assert param_bytes(state.sigma) != sigma_before
    assert np.isfinite(record["l_mega"])


def test_meta_gradient_zero_when_inner_rate_zero():
    ds, batch = tiny_fixture()
    state = fresh_state(small_dims(2))
    tape = ad.Tape()
    with ad.use_tape(tape):
        state.adopt_all(tape)
        grads, _ = tr.meta_gradients(state.phi, state.psi, state.sigma,
                                     batch, hp(inner_lr=0.0))
        total = sum(float(np.abs(grads[t].data).max())
                    for t in state.sigma.tensors())
    assert total < 1e-12


def _meta_objective_value(phi_data, psi_data, sigma_tensors, batch, hparams,
                          hat_weights=None):
    """Recompute the meta pipeline from detached parameter values.

    The stop-gradient view is a constant of the objective: when comparing
    against the implemented derivative, ``hat_weights`` must be pinned to
    the unperturbed weights (differentiating "through" the detached view is
    exactly what the stop gradient forbids).
    """
    tape = ad.Tape()
    with ad.use_tape(tape):
        phi = gnn.EncoderParams.from_tensors(
            [tape.adopt(ad.Tensor(d.copy())) for d in phi_data])
        psi = gnn.MlpParams.from_tensors(
            [tape.adopt(ad.Tensor(d.copy())) for d in psi_data])
        sigma = lga.AugmenterParams.from_tensors(
            [tape.adopt(ad.Tensor(t.data.copy())) for t in sigma_tensors])
        weights = lga.lga_edge_weights(batch, sigma)
        z = tr._encode_project(batch, lga.unit_edge_weights(batch), phi, psi)
        z_aug = tr._encode_project(batch, weights, phi, psi)
        l_contrast = losses.nt_xent(z, z_aug, hparams.tau)
        enc = phi.tensors() + psi.tensors()
        grads = ad.backward(l_contrast, enc, create_graph=True)
        virtual = ad.sgd_virtual_step(enc, grads, hparams.inner_lr)
        phi_v, psi_v = tr._split_encoder_tensors(phi, virtual)
        hat = ad.detach(weights) if hat_weights is None \
            else ad.constant(hat_weights)
        z_meta = tr._encode_project(batch, lga.unit_edge_weights(batch),
                                    phi_v, psi_v)
        z_aug_meta = tr._encode_project(batch, hat, phi_v, psi_v)
        return losses.mega_loss(losses.instance_corr(z_meta, z_aug_meta),
                                losses.feature_corr(z_meta, z_aug_meta),
                                hparams.lam).item()


def test_meta_gradient_matches_finite_differences():
    """The central mechanism: analytic grad through the virtual step vs
    numeric differentiation of the whole pipeline."""
    ds, batch = tiny_fixture()
    state = fresh_state(small_dims(2), seed=4)
    hparams = hp(inner_lr=0.05, lam=0.1)  # a visible inner step
    tape = ad.Tape()
    with ad.use_tape(tape):
        state.adopt_all(tape)
        grads, _ = tr.meta_gradients(state.phi, state.psi, state.sigma,
                                     batch, hparams)
    phi_data = [t.data for t in state.phi.tensors()]
    psi_data = [t.data for t in state.psi.tensors()]
    probe = ad.Tape()
    with ad.use_tape(probe):
        sigma = lga.AugmenterParams.from_tensors(
            [probe.adopt(ad.Tensor(t.data.copy()))
             for t in state.sigma.tensors()])
        base_weights = lga.lga_edge_weights(batch, sigma).data

    for t in state.sigma.tensors():
        def value_with(replaced, target=t):
            originals = state.sigma.tensors()
            subs = [replaced if s is target else s for s in originals]
            return _meta_objective_value(
                phi_data, psi_data, subs, batch, hparams,
                hat_weights=base_weights)

        fd = ad.finite_diff_gradient(value_with, t, step=1e-5)
        assert ad.max_relative_error(grads[t], fd) < 1e-3


def test_meta_step_moves_instance_term_downhill():
    ds, batch = tiny_fixture()
    dims = small_dims(2)
    state = fresh_state(dims, seed=4)
    # zero augmenter: every non-self weight starts at exactly 0.5
    state.sigma = lga.AugmenterParams.from_tensors(
        [ad.constant(np.zeros(t.shape)) for t in state.sigma.tensors()])
    hparams = hp(inner_lr=0.05, lam=0.0, augmenter_lr=1e-4)
    # the objective the step descends holds the stop-gradient view fixed
    base_weights = np.ones((batch.n_edges, 1))
    base_weights[:batch.n_nonself] = 0.5  # sigmoid(0)

    def instance_term():
        return _meta_objective_value(
            [t.data for t in state.phi.tensors()],
            [t.data for t in state.psi.tensors()],
            state.sigma.tensors(), batch, hparams,
            hat_weights=base_weights)

    before = instance_term()
    tape = ad.Tape()
    with ad.use_tape(tape):
        state.adopt_all(tape)
        tr.meta_step(state, batch, hparams)
    after = instance_term()
    assert after < before


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------

def test_alternation_schedule_c_m_c_m():
    ds = synthetic_dataset(n_per_class=8, seed=1)
    _, log = tr.train(ds, hp(epochs=1, batch_size=4), mode="mega")
    kinds = [r["step"] for r in log.records]
    assert len(kinds) == 4
    assert kinds == ["contrast", "meta", "contrast", "meta"]
    assert [r["iteration"] for r in log.records] == [0, 1, 2, 3]


def test_alternation_safety_parameters_mutate_on_their_iterations():
    ds = synthetic_dataset(n_per_class=6, seed=2)
    dims = small_dims(ds.feature_width)
    state = tr.init_train_state(dims, 0)
    hparams = hp(epochs=1, batch_size=6)
    rng = np.random.default_rng(0)
    tape = ad.Tape()
    with ad.use_tape(tape):
        for iteration in range(6):
            records = [ds.records[i]
                       for i in rng.permutation(len(ds.records))[:6]]
            batch = gd.batch_graphs(records)
            tape.reset()
            state.adopt_all(tape)
            phi_b = param_bytes(state.phi)
            psi_b = param_bytes(state.psi)
            sigma_b = param_bytes(state.sigma)
            if iteration % 2 == 0:
                tr.contrast_step(state, batch, hparams)
                assert param_bytes(state.sigma) == sigma_b
                assert param_bytes(state.phi) != phi_b
            else:
                tr.meta_step(state, batch, hparams)
                assert param_bytes(state.phi) == phi_b
                assert param_bytes(state.psi) == psi_b
                assert param_bytes(state.sigma) != sigma_b
            state.iteration += 1


def test_train_determinism_same_seed_identical_log():
    ds = synthetic_dataset(n_per_class=5, seed=7)
    _, log_a = tr.train(ds, hp(epochs=2, batch_size=5, seed=3), mode="mega")
    _, log_b = tr.train(ds, hp(epochs=2, batch_size=5, seed=3), mode="mega")
    assert log_a.records == log_b.records
    assert log_a.summary == log_b.summary


def test_train_rejects_bad_inputs():
    ds = synthetic_dataset(n_per_class=3)
    with pytest.raises(ConfigError):
        tr.train(ds, hp(batch_size=1))
    with pytest.raises(ConfigError):
        tr.train(ds, hp(), mode="gin-riu")
    empty = gd.Dataset("E", [], 0)
    with pytest.raises(ConfigError):
        tr.train(empty, hp())
    bare = gd.Dataset("B", [gd.GraphRecord(gd.GraphTopology(1, ()), 0)], 1)
    with pytest.raises(ConfigError):
        tr.train(bare, hp())


def test_mega_il_forces_lambda_zero():
    ds = synthetic_dataset(n_per_class=4, seed=4)
    _, log = tr.train(ds, hp(epochs=2, batch_size=8, lam=0.7), mode="mega-il")
    meta_records = [r for r in log.records if r["step"] == "meta"]
    assert meta_records
    for r in meta_records:
        # with lam = 0 the logged objective equals the pure instance term
        assert abs(r["l_mega"] - (r["tr_c"] - r["de_c"])) < 1e-9


def test_non_finite_loss_aborts_with_iteration_context():
    ds, batch = tiny_fixture()
    state = fresh_state(small_dims(2))
    # poison the projection head so features blow up to inf
    state.psi = gnn.MlpParams.from_tensors(
        [ad.constant(np.full(t.shape, 1e308)) for t in state.psi.tensors()])
    tape = ad.Tape()
    with ad.use_tape(tape), np.errstate(over="ignore", invalid="ignore",
                                        divide="ignore"):
        state.adopt_all(tape)
        with pytest.raises(NumericError) as exc:
            tr.contrast_step(state, batch, hp())
    assert "iteration" in str(exc.value)
