"""Predictor structure, loss semantics, gradients, and the training loop."""

import datetime as dt
import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import make_chain, make_feature_tensor, model_grad_fd_err
from trafficfuse.autodiff import Tensor, no_grad
from trafficfuse.ctm import default_fd_params
from trafficfuse.features import build_tensor
from trafficfuse.model import (
    ModelConfig,
    Prediction,
    forward,
    init_params,
    loss_components,
    normalized_adjacency,
)
from trafficfuse.network import CountMatrix
from trafficfuse.train import (
    _evaluate,
    build_windows,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

TINY = ModelConfig(
    n_features=5,
    embed_dim=4,
    spatial_layers=1,
    temporal_blocks=1,
    heads=2,
    history=3,
    horizon=2,
    ffn_width=8,
)


def _tiny_inputs(cfg, n=3, b=2, seed=0):
    rng = np.random.default_rng(seed)
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = 1.0
    a_hat = normalized_adjacency(a)
    hist = rng.normal(size=(b, cfg.history, n, cfg.n_features))
    anchor = rng.uniform(5, 20, size=(b, n))
    return a_hat, hist, anchor


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(embed_dim=5, heads=2)


def test_config_rejects_nonpositive_sizes():
    with pytest.raises(ValueError, match="spatial_layers"):
        ModelConfig(spatial_layers=0)


def test_config_dict_round_trip():
    cfg = ModelConfig(embed_dim=16, heads=4, lambda_cap=2.5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_normalized_adjacency_rows():
    a = np.array([[0.0, 2.0, 2.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    ah = normalized_adjacency(a)
    assert np.allclose(ah[0], [0, 0.5, 0.5])
    assert np.allclose(ah[1], [1, 0, 0])
    assert np.array_equal(ah[2], [0, 0, 0])  # disconnected row stays zero
    assert np.array_equal(normalized_adjacency(a, row_normalize=False), a)


def test_untrained_model_is_persistence():
    # zero-initialized head outputs: mu = 0, sigma = 1, q_hat = anchor
    cfg = TINY
    params = init_params(cfg, np.random.default_rng(3))
    a_hat, hist, anchor = _tiny_inputs(cfg)
    pred = forward(params, cfg, a_hat, hist, anchor)
    assert np.array_equal(pred.mu.data, np.zeros((2, 3, cfg.horizon)))
    assert np.array_equal(pred.sigma.data, np.ones((2, 3, cfg.horizon)))
    assert np.array_equal(pred.q_hat.data, np.broadcast_to(anchor[:, :, None], (2, 3, cfg.horizon)))


def test_forward_shape_validation():
    cfg = TINY
    params = init_params(cfg, np.random.default_rng(0))
    a_hat, hist, anchor = _tiny_inputs(cfg)
    with pytest.raises(ValueError, match="history window"):
        forward(params, cfg, a_hat, hist[:, :2], anchor)
    with pytest.raises(ValueError, match="anchor"):
        forward(params, cfg, a_hat, hist, anchor[:, :2])


def test_forward_permutation_equivariance():
    cfg = TINY
    rng = np.random.default_rng(11)
    params = init_params(cfg, rng)
    for p in params.values():
        p.data = p.data + rng.normal(scale=0.1, size=p.data.shape)
    n = 4
    a = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
    np.fill_diagonal(a, 0)
    hist = rng.normal(size=(2, cfg.history, n, cfg.n_features))
    anchor = rng.uniform(5, 20, size=(2, n))
    perm = np.array([2, 0, 3, 1])
    base = forward(params, cfg, normalized_adjacency(a), hist, anchor)
    shuf = forward(
        params,
        cfg,
        normalized_adjacency(a[perm][:, perm]),
        hist[:, :, perm, :],
        anchor[:, perm],
    )
    assert np.allclose(shuf.q_hat.data, base.q_hat.data[:, perm, :], atol=1e-10)
    assert np.allclose(shuf.sigma.data, base.sigma.data[:, perm, :], atol=1e-10)


def _manual_prediction(q_hat, log_var=None):
    q = Tensor(np.asarray(q_hat, dtype=float))
    lv = Tensor(np.zeros_like(q.data) if log_var is None else np.asarray(log_var, dtype=float))
    return Prediction(q_hat=q, mu=q, sigma=(lv * 0.5).exp(), log_var=lv)


def test_capacity_hinge_frozen_value():
    # one of N*F = 6 slots exceeds capacity by 3 -> mean hinge 0.5
    qmax = np.array([20.0, 20.0, 20.0])
    q_hat = np.array([[[10.0, 10.0], [10.0, 10.0], [10.0, qmax[2] + 3.0]]])
    pred = _manual_prediction(q_hat)
    target = q_hat.copy()
    n_tot = q_hat[0, :, 0].sum(keepdims=True)
    comps = loss_components(pred, target, ModelConfig(), qmax, n_tot)
    assert comps["cap"].item() == pytest.approx(0.5, abs=1e-12)
    assert comps["mae"].item() == 0.0
    assert comps["cons"].item() == 0.0
    assert comps["total"].item() == pytest.approx(0.5, abs=1e-12)


def test_conservation_hinge_tolerance_band():
    # drift exactly at the tolerance tau_b = 0.01 * n_tot costs nothing
    qmax = np.full(2, 1e9)
    cfg = ModelConfig()
    at_tol = _manual_prediction(np.array([[[60.0], [41.0]]]))
    comps = loss_components(at_tol, at_tol.q_hat.data.copy(), cfg, qmax, np.array([100.0]))
    assert comps["cons"].item() == 0.0
    over = _manual_prediction(np.array([[[60.0], [43.0]]]))
    comps = loss_components(over, over.q_hat.data.copy(), cfg, qmax, np.array([100.0]))
    assert comps["cons"].item() == pytest.approx(2.0, abs=1e-12)
    under = _manual_prediction(np.array([[[60.0], [35.0]]]))
    comps = loss_components(under, under.q_hat.data.copy(), cfg, qmax, np.array([100.0]))
    assert comps["cons"].item() == pytest.approx(4.0, abs=1e-12)


def test_mae_and_nll_hand_values():
    q_hat = np.zeros((1, 1, 2))
    target = np.array([[[1.0, -2.0]]])
    log_var = np.array([[[0.5, -0.3]]])
    pred = _manual_prediction(q_hat, log_var)
    comps = loss_components(pred, target, ModelConfig(), np.full(1, 1e9), np.array([1.0]))
    assert comps["mae"].item() == pytest.approx(1.5, abs=1e-12)
    want_nll = 0.5 * ((0.5 + 1.0 * math.exp(-0.5)) + (-0.3 + 4.0 * math.exp(0.3))) / 2.0
    assert comps["nll"].item() == pytest.approx(want_nll, rel=1e-12)


def test_loss_weight_doubling_is_exact():
    cfg1 = ModelConfig(
        n_features=5, embed_dim=4, spatial_layers=1, temporal_blocks=1,
        heads=2, history=3, horizon=2, ffn_width=8,
        lambda_mae=1.0, lambda_nll=0.0, lambda_cons=0.0, lambda_cap=0.0,
    )
    cfg2 = ModelConfig(**{**cfg1.to_dict(), "lambda_mae": 2.0})
    rng = np.random.default_rng(5)
    params = init_params(cfg1, rng)
    for p in params.values():
        p.data = p.data + rng.normal(scale=0.05, size=p.data.shape)
    a_hat, hist, anchor = _tiny_inputs(cfg1, seed=5)
    target = anchor[:, :, None] + rng.normal(size=(2, 3, cfg1.horizon))
    qmax = np.full(3, 1e9)
    n_tot = target[:, :, 0].sum(axis=1)

    grads = []
    for cfg in (cfg1, cfg2):
        for p in params.values():
            p.zero_grad()
        comps = loss_components(forward(params, cfg, a_hat, hist, anchor), target, cfg, qmax, n_tot)
        comps["total"].backward()
        grads.append({k: p.grad.copy() for k, p in params.items()})
    for k in grads[0]:
        assert np.array_equal(grads[1][k], 2.0 * grads[0][k]), k


def test_nll_minimum_sits_at_mean_squared_residual():
    rng = np.random.default_rng(9)
    r = rng.normal(0.0, 1.7, size=4000)
    m = float(np.mean(r * r))
    q_hat = np.zeros((1, r.size, 1))
    target = r.reshape(1, -1, 1)
    qmax = np.full(r.size, 1e9)

    def nll_at(log_s):
        pred = _manual_prediction(q_hat, np.full_like(q_hat, log_s))
        return loss_components(pred, target, ModelConfig(), qmax, np.array([0.0]))["nll"].item()

    res = minimize_scalar(nll_at, bounds=(math.log(m) - 3, math.log(m) + 3), method="bounded",
                          options={"xatol": 1e-10})
    assert math.exp(res.x) == pytest.approx(m, rel=1e-3)


def test_gradients_match_finite_differences():
    cfg = ModelConfig(
        n_features=22, embed_dim=4, spatial_layers=2, temporal_blocks=1,
        heads=2, history=3, horizon=2, ffn_width=8,
    )
    assert model_grad_fd_err(cfg, n_segments=3, batch=2, seed=7) < 1e-4


def _training_setup(t_bins=96, seed=0):
    net = make_chain(3, boundary=(0, 2))
    fd = default_fd_params(net)
    tt = np.arange(t_bins)
    counts = np.stack([20 + 8 * np.sin(2 * np.pi * tt / 12.0 + i) for i in range(3)])
    cm = CountMatrix(counts, 900, dt.datetime(2024, 3, 4, 0, 0))
    speeds = np.full_like(counts, 10.0)
    tensor = build_tensor(net, fd, cm, speeds)
    cfg = ModelConfig(
        n_features=22, embed_dim=8, spatial_layers=1, temporal_blocks=1,
        heads=2, history=4, horizon=2, ffn_width=16,
    )
    a_hat = normalized_adjacency(net.adjacency(), cfg.row_normalize_adjacency)
    windows = build_windows(tensor, counts, cfg)
    qmax = np.array([s.capacity_vph / 3600.0 * 900 for s in net.segments])
    return cfg, a_hat, windows, qmax, tensor, counts


def test_build_windows_alignment():
    rng = np.random.default_rng(2)
    values = rng.normal(size=(2, 12, 5))
    tensor = make_feature_tensor(values)
    counts = np.arange(24, dtype=float).reshape(2, 12)
    cfg = TINY
    w = build_windows(tensor, counts, cfg)
    assert len(w) == 8  # t = 2 .. 9
    assert np.array_equal(w.t_index, np.arange(2, 10))
    assert np.array_equal(w.hist[0], values[:, 0:3, :].transpose(1, 0, 2))
    assert np.array_equal(w.anchor[0], counts[:, 2])
    assert np.array_equal(w.target[0], counts[:, 3:5])
    # without boundary data the conserved total is the observed next total
    assert np.array_equal(w.n_tot, counts[:, 3:11].sum(axis=0))


def test_build_windows_boundary_totals():
    values = np.zeros((2, 12, 5))
    tensor = make_feature_tensor(values)
    counts = np.ones((2, 12))
    bi = np.full((2, 12), 0.5)
    bo = np.full((2, 12), 0.2)
    w = build_windows(tensor, counts, TINY, boundary_in=bi, boundary_out=bo)
    # anchor total 2, net boundary inflow 2 * (0.5 - 0.2)
    assert np.allclose(w.n_tot, 2.0 + 0.6)


def test_build_windows_rejects_short_series():
    tensor = make_feature_tensor(np.zeros((2, 4, 5)))
    with pytest.raises(ValueError, match="window"):
        build_windows(tensor, np.zeros((2, 4)), TINY)


def test_training_beats_untrained_baseline():
    cfg, a_hat, windows, qmax, _, _ = _training_setup()
    res = train(cfg, a_hat, windows, qmax, seed=1, steps=150, batch_size=8, eval_every=25)
    n_val = int(round(len(windows) * 0.2))
    val_w = windows.subset(np.arange(len(windows) - n_val, len(windows)))
    from trafficfuse.util import substream

    init = init_params(cfg, substream(1, "init"))
    assert res.best_val < _evaluate(init, cfg, a_hat, val_w, qmax)
    assert res.log, "training log should not be empty"
    for p in res.params.values():
        assert np.isfinite(p.data).all()


def test_training_is_seed_deterministic():
    cfg, a_hat, windows, qmax, _, _ = _training_setup()
    r1 = train(cfg, a_hat, windows, qmax, seed=4, steps=40, batch_size=8, eval_every=20)
    r2 = train(cfg, a_hat, windows, qmax, seed=4, steps=40, batch_size=8, eval_every=20)
    for k in r1.params:
        assert np.array_equal(r1.params[k].data, r2.params[k].data), k
    assert r1.log == r2.log
    r3 = train(cfg, a_hat, windows, qmax, seed=5, steps=40, batch_size=8, eval_every=20)
    assert any(not np.array_equal(r1.params[k].data, r3.params[k].data) for k in r1.params)


def test_training_divergence_is_reported():
    cfg, a_hat, windows, qmax, _, _ = _training_setup()
    with np.errstate(all="ignore"):
        with pytest.raises(RuntimeError, match="not finite"):
            train(cfg, a_hat, windows, qmax, seed=2, steps=8, batch_size=4, lr=1e12, eval_every=100)


def test_predict_matches_forward():
    cfg, a_hat, windows, qmax, tensor, counts = _training_setup()
    params = init_params(cfg, np.random.default_rng(6))
    t_idx = np.array([5, 6, 9])
    q_hat, sigma = predict(params, cfg, a_hat, tensor, counts, t_idx)
    assert q_hat.shape == (3, 3, cfg.horizon) and sigma.shape == q_hat.shape
    sel = np.searchsorted(windows.t_index, t_idx)
    with no_grad():
        pred = forward(params, cfg, a_hat, windows.hist[sel], windows.anchor[sel])
    assert np.array_equal(q_hat, pred.q_hat.data)
    assert np.array_equal(sigma, pred.sigma.data)


def test_predict_rejects_short_history():
    cfg, a_hat, _, _, tensor, counts = _training_setup()
    with pytest.raises(ValueError, match="history"):
        predict(init_params(cfg, np.random.default_rng(0)), cfg, a_hat, tensor, counts, np.array([1]))


def test_checkpoint_round_trip(tmp_path):
    cfg = TINY
    params = init_params(cfg, np.random.default_rng(8))
    prefix = str(tmp_path / "model")
    save_checkpoint(prefix, params, cfg)
    loaded, cfg2 = load_checkpoint(prefix)
    assert cfg2 == cfg
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k].data, params[k].data)
    a_hat, hist, anchor = _tiny_inputs(cfg)
    with no_grad():
        a = forward(params, cfg, a_hat, hist, anchor)
        b = forward(loaded, cfg2, a_hat, hist, anchor)
    assert np.array_equal(a.q_hat.data, b.q_hat.data)


def test_checkpoint_rejects_mismatched_contents(tmp_path):
    cfg = TINY
    params = init_params(cfg, np.random.default_rng(8))
    prefix = str(tmp_path / "model")
    save_checkpoint(prefix, params, cfg)
    arrays = {k: v.data for k, v in params.items()}
    dropped = dict(arrays)
    dropped.pop("mu_w1")
    np.savez(prefix + ".npz", **dropped)
    with pytest.raises(ValueError, match="parameter names"):
        load_checkpoint(prefix)
    bad_shape = dict(arrays)
    bad_shape["w_in"] = np.zeros((2, 2))
    np.savez(prefix + ".npz", **bad_shape)
    with pytest.raises(ValueError, match="w_in"):
        load_checkpoint(prefix)
