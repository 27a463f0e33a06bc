import math

import numpy as np
import pytest

from dynvae.dynamics import dynamic_layer_forward, DynamicLayerF, stationary_B
from dynvae.errors import FormatError, ShapeError, TrainingDivergedError, UsageError
from dynvae.model import (
    DvaeModel,
    TrainConfig,
    decoder_f_theta,
    dvae_loss,
    encode,
    estimate_initial_state,
    load_model,
    loss_gradcheck,
    reconstruction_error,
    reference_gradcheck,
    save_model,
    synthesize,
    train,
)
from dynvae.nn import Dense, Mlp, forward
from dynvae.tensor import Prng


def tiny(d=3, n=2, order=1, seed=0, **kw):
    cfg = TrainConfig(latent_dim=n, encoder_hidden=(5,), decoder_hidden=(4,), seed=seed, order=order, **kw)
    return DvaeModel.create(d, cfg)


def linear_net(w, act="identity", bias=None):
    w = np.asarray(w, float)
    return Mlp([Dense(w, np.zeros(w.shape[0]) if bias is None else bias, act)])


def test_create_starts_stationary():
    m = tiny(n=3)
    np.testing.assert_allclose(m.A, 0.81 * np.eye(3))
    assert m.stationarity_residual() <= 1e-28
    assert m.encoder.out_dim == 4 * 3 and m.decoder.in_dim == 3


def test_config_validation_and_round_trip():
    with pytest.raises(UsageError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(UsageError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig.from_dict({"lambda": 5.0, "sigma_y2": 4.5})
    assert cfg.lam == 5.0 and TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_decoder_identity_case():
    n = d = 2
    m = tiny(d, n)
    m.blocks = [np.zeros((2, 2)), np.eye(2)]
    m.decoder = linear_net(np.eye(2))
    x = Prng(1).gaussian((4, 4))
    y1, y2 = decoder_f_theta(m, x)
    np.testing.assert_array_equal(y1, x[:, :2])
    np.testing.assert_array_equal(y2, x[:, 2:])


def test_decoder_constant_case():
    m = tiny(3, 2)
    m.decoder = linear_net(np.zeros((3, 2)), "sigmoid", np.full(3, 0.7))
    y1, y2 = decoder_f_theta(m, Prng(2).gaussian((5, 4)))
    s = 1 / (1 + math.exp(-0.7))
    np.testing.assert_allclose(y1, s, atol=1e-15)
    np.testing.assert_allclose(y2, s, atol=1e-15)


def test_decoder_composition_oracle():
    m = tiny(3, 2, seed=3)
    rng = Prng(4)
    m.blocks = [0.5 * rng.gaussian((2, 2)), 0.5 * rng.gaussian((2, 2))]
    x = rng.gaussian((6, 4))
    h1, h2 = dynamic_layer_forward(x, DynamicLayerF(1, m.blocks))
    y1, y2 = decoder_f_theta(m, x)
    np.testing.assert_allclose(y1, forward(m.decoder, h1), atol=1e-14)
    np.testing.assert_allclose(y2, forward(m.decoder, h2), atol=1e-14)
    with pytest.raises(ShapeError):
        decoder_f_theta(m, np.ones((2, 3)))


def zero_encoder(m):
    enc = m.encoder
    for layer in enc.layers:
        layer.weight[:] = 0
        layer.bias[:] = 0


def test_encode_zero_weights_and_eps_hook():
    m = tiny()
    zero_encoder(m)
    frames = Prng(5).uniform((3, 2, 3))
    eps = Prng(6).gaussian((3, 4))
    mu, logvar, x = encode(m, frames, eps=eps)
    assert np.all(mu == 0) and np.all(logvar == 0)
    np.testing.assert_array_equal(x, eps)
    m2 = tiny(seed=7)
    mu, _, x = encode(m2, frames, eps=np.zeros((3, 4)))
    np.testing.assert_array_equal(x, mu)


def test_logvar_is_clamped():
    m = tiny()
    m.encoder.layers[-1].bias[4:] = 50.0
    _, logvar, _ = encode(m, Prng(8).uniform((2, 2, 3)), rng=Prng(9))
    assert logvar.max() == 10.0


def test_loss_zero_at_perfect_reconstruction():
    m = tiny()
    zero_encoder(m)
    target = forward(m.decoder, np.zeros((1, 2)))[0]
    frames = np.tile(target, (4, 2, 1))
    res = dvae_loss(m, frames, eps=np.zeros((4, 4)))
    assert res.loss == pytest.approx(0.0, abs=1e-20)


def plain_vae_loss(enc_w, enc_b, dec_layers, frames, eps, sigma_y2, n):
    """Independent reference: leaky-relu encoder, two-frame VAE with a shared per-frame decoder."""
    total = 0.0
    for y, e in zip(frames, eps):
        inp = y.reshape(-1)
        hid = inp @ enc_w[0].T + enc_b[0]
        hid = np.where(hid > 0, hid, 0.2 * hid)
        out = hid @ enc_w[1].T + enc_b[1]
        mu, lv = out[: 2 * n], np.clip(out[2 * n :], -10, 10)
        z = mu + np.exp(lv / 2) * e
        rec = 0.0
        for k in range(2):
            a = z[k * n : (k + 1) * n]
            for j, (w, b, act) in enumerate(dec_layers):
                a = a @ w.T + b
                if act == "leaky_relu":
                    a = np.where(a > 0, a, 0.2 * a)
                elif act == "sigmoid":
                    a = 1 / (1 + np.exp(-a))
            rec += np.sum((a - y[k]) ** 2) / (2 * sigma_y2)
        kl = 0.5 * np.sum(mu**2 + np.exp(lv) - 1 - lv)
        total += rec + kl
    return total / len(frames)


def test_lambda_zero_identity_layer_is_plain_vae():
    m = tiny(d=3, n=2, seed=13, lam=0.0, sigma_y2=0.3)
    m.blocks = [np.zeros((2, 2)), np.eye(2)]
    frames = Prng(14).uniform((6, 2, 3))
    eps = Prng(15).gaussian((6, 4))
    got = dvae_loss(m, frames, eps=eps, need_grads=False).loss
    enc = m.encoder.layers
    ref = plain_vae_loss(
        [l.weight for l in enc], [l.bias for l in enc],
        [(l.weight, l.bias, l.activation) for l in m.decoder.layers], frames, eps, 0.3, 2,
    )
    assert abs(got - ref) <= 1e-10


def test_full_loss_gradcheck_small_models():
    assert reference_gradcheck(0).max_rel_error <= 1e-5
    assert reference_gradcheck(1, masked=True).max_rel_error <= 1e-5
    assert reference_gradcheck(2, order=2).max_rel_error <= 1e-5
    m = tiny(d=2, n=1, seed=16, sigma_y2=0.5)
    m.blocks[0] += 0.1
    frames = Prng(17).uniform((4, 2, 2))
    assert loss_gradcheck(m, frames).max_rel_error <= 1e-5


def test_empty_batch_and_mask_checks():
    m = tiny()
    with pytest.raises(UsageError):
        dvae_loss(m, np.zeros((0, 2, 3)), rng=Prng(0))
    with pytest.raises(ShapeError):
        dvae_loss(m, np.zeros((2, 2, 3)), masks=np.ones((2, 2, 2), bool), rng=Prng(0))


def test_all_ones_mask_equals_unmasked():
    m = tiny(seed=18)
    frames = Prng(19).uniform((5, 2, 3))
    a = dvae_loss(m, frames, rng=Prng(20))
    b = dvae_loss(m, frames, masks=np.ones(frames.shape, bool), rng=Prng(20))
    assert a.loss == b.loss
    assert all(np.array_equal(x, y) for x, y in zip(a.grads, b.grads))


def test_masked_pixels_do_not_matter():
    m = tiny(seed=21)
    frames = Prng(22).uniform((5, 2, 3))
    masks = Prng(23).uniform(frames.shape) > 0.5
    other = np.where(masks, frames, Prng(24).uniform(frames.shape))
    a = dvae_loss(m, frames, masks, eps=np.zeros((5, 4)), need_grads=False).loss
    b = dvae_loss(m, other, masks, eps=np.zeros((5, 4)), need_grads=False).loss
    assert a == b


def test_kl_non_negative_and_zero_only_at_prior():
    m = tiny(seed=25)
    frames = Prng(26).uniform((8, 2, 3))
    assert dvae_loss(m, frames, rng=Prng(1), need_grads=False).kl > 0
    zero_encoder(m)
    assert dvae_loss(m, frames, rng=Prng(1), need_grads=False).kl == 0.0


def test_weight_sharing_directional_derivatives():
    m = tiny(seed=27)
    x = Prng(28).gaussian((3, 4))
    base = decoder_f_theta(m, x)

    def changed(mutate):
        c = m.copy()
        mutate(c)
        y = decoder_f_theta(c, x)
        return [not np.allclose(a, b, atol=0, rtol=0) for a, b in zip(y, base)]

    def bump_decoder(c):
        c.decoder.layers[0].weight += 1e-3

    def bump_a(c):
        c.blocks[0] += 1e-3

    def bump_encoder(c):
        c.encoder.layers[0].weight += 1e-3

    assert changed(bump_decoder) == [True, True]
    assert changed(bump_a) == [False, True]
    assert changed(bump_encoder) == [False, False]


def test_initial_state_contract():
    m = tiny(seed=29)
    y = Prng(30).uniform((2, 3))
    rng = Prng(31)
    state = rng.state
    h0 = estimate_initial_state(m, y[0], y[1])
    assert rng.state == state
    np.testing.assert_array_equal(h0, encode(m, y[None])[0][0, :2])
    zero_encoder(m)
    assert np.all(estimate_initial_state(m, y[0], y[1]) == 0)


def test_synthesize_frozen_dynamics_and_determinism():
    m = tiny(seed=32)
    h0 = np.array([0.3, -0.2])
    frozen = m.copy()
    frozen.blocks = [np.eye(2), np.zeros((2, 2))]
    with pytest.warns(RuntimeWarning, match="spectral radius"):
        out = synthesize(frozen, h0, 5, Prng(1))
    np.testing.assert_allclose(out, np.tile(forward(m.decoder, h0[None]), (5, 1)), atol=1e-15)
    a, b = synthesize(m, h0, 30, Prng(2)), synthesize(m, h0, 30, Prng(2))
    assert np.array_equal(a, b)
    noisy = synthesize(m, h0, 30, Prng(2), noise=True)
    assert not np.array_equal(noisy, a) and noisy.min() >= 0 and noisy.max() <= 1
    assert synthesize(m, h0, 0, Prng(2)).shape == (0, 3)


def test_train_zero_epochs_and_determinism():
    frames = Prng(33).uniform((20, 2, 3))
    cfg = TrainConfig(latent_dim=2, encoder_hidden=(5,), decoder_hidden=(4,), epochs=0)
    m = DvaeModel.create(3, cfg)
    before = [p.copy() for p in m.params()]
    train(m, frames, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params()))
    cfg = TrainConfig(latent_dim=2, encoder_hidden=(5,), decoder_hidden=(4,), epochs=3, batch_size=7)
    runs = [train(DvaeModel.create(3, cfg), frames, cfg) for _ in range(2)]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][0].params(), runs[1][0].params()))
    assert [e.loss for e in runs[0][1].epochs] == [e.loss for e in runs[1][1].epochs]
    assert len(runs[0][1].epochs) == 3


def test_train_validation_tail():
    frames = Prng(34).uniform((20, 2, 3))
    cfg = TrainConfig(latent_dim=2, encoder_hidden=(5,), decoder_hidden=(4,), epochs=2, validation_fraction=0.2)
    _, report = train(DvaeModel.create(3, cfg), frames, cfg)
    assert all(e.val_loss is not None for e in report.epochs)
    assert report.to_dict()["epochs"][0]["epoch"] == 1


def test_train_divergence_names_epoch():
    frames = Prng(35).uniform((10, 2, 3))
    frames[3, 0, 1] = np.nan
    cfg = TrainConfig(latent_dim=2, encoder_hidden=(5,), decoder_hidden=(4,), epochs=2)
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        train(DvaeModel.create(3, cfg), frames, cfg)


def test_checkpoint_round_trip_and_layout(tmp_path):
    cfg = TrainConfig(latent_dim=2, encoder_hidden=(5,), decoder_hidden=(4,), epochs=1)
    m, _ = train(DvaeModel.create(3, cfg, (1, 3, 1)), Prng(36).uniform((6, 2, 3)), cfg)
    save_model(m, tmp_path / "m.dvm")
    back = load_model(tmp_path / "m.dvm")
    assert all(np.array_equal(a, b) for a, b in zip(m.params(), back.params()))
    assert back.frame_shape == (1, 3, 1) and back.training["epochs"] == 1
    save_model(back, tmp_path / "n.dvm")
    raw = (tmp_path / "m.dvm").read_bytes()
    assert raw == (tmp_path / "n.dvm").read_bytes()
    assert raw[:4] == b"DVMD"
    total = sum(p.size for p in m.params())
    tail = np.frombuffer(raw[len(raw) - 8 * total :], "<f8")
    np.testing.assert_array_equal(tail[:4], m.A.ravel())
    (tmp_path / "t.dvm").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_model(tmp_path / "t.dvm")
    (tmp_path / "x.dvm").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_model(tmp_path / "x.dvm")


def test_order2_model_synthesis_via_solver():
    cfg = TrainConfig(latent_dim=2, encoder_hidden=(5,), decoder_hidden=(4,), order=2)
    m = DvaeModel.create(3, cfg)
    assert m.stationarity_residual() <= 1e-28
    v2 = m.var2_model()
    np.testing.assert_allclose(v2.A0, 0, atol=1e-12)
    np.testing.assert_allclose(v2.A1, 0.81 * np.eye(2), atol=1e-12)
    out = synthesize(m, np.zeros((2, 2)), 10, Prng(1))
    assert out.shape == (10, 3)
    y = Prng(2).uniform((3, 3))
    assert estimate_initial_state(m, *y).shape == (2, 2)


def test_reconstruction_error_respects_masks():
    m = tiny(seed=37)
    frames = Prng(38).uniform((4, 2, 3))
    full = reconstruction_error(m, frames)
    masks = np.ones(frames.shape, bool)
    assert reconstruction_error(m, frames, masks) == pytest.approx(full)


def test_stationary_b_init_matches_constraint():
    m = tiny(n=4)
    np.testing.assert_allclose(m.B, stationary_B(m.A))
