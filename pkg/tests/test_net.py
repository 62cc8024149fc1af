import math
from datetime import date

import numpy as np
import pytest

from hydro_embed.errors import BasinIndexOutOfRange, NonFiniteActivation, TapeReuse
from hydro_embed.net import (
    ForwardTape,
    Gradients,
    ModelConfig,
    ModelParams,
    assemble_batch,
    assemble_input,
    backward,
    backward_batch,
    draw_dropout_mask,
    forward,
    forward_batch,
    init_params,
)
from hydro_embed.pipeline import Sample
from hydro_embed.prng import Xoshiro256StarStar
from hydro_embed.train import LossConfig, nse_star_loss


def _sample(window, basin_index=0, static=None, target=0.0):
    return Sample(
        basin_index=basin_index,
        window=np.asarray(window, dtype=np.float64),
        static=None if static is None else np.asarray(static, dtype=np.float64),
        target=target,
        target_date=date(2000, 1, 1),
    )


def _random_samples(rng, config, count, t_len):
    out = []
    for j in range(count):
        static = rng.normal(size=config.d_static) if config.use_static else None
        out.append(
            _sample(
                rng.normal(size=(t_len, config.d_dyn)),
                basin_index=j % max(1, config.num_basins),
                static=static,
                target=float(rng.normal()),
            )
        )
    return out


# --- init -------------------------------------------------------------------


def test_init_forget_gate_bias():
    cfg = ModelConfig(d_dyn=5, hidden_size=4)
    params = init_params(cfg, seed=0)
    assert np.all(params.b[4:8] == 1.0)
    assert np.all(params.b[:4] == 0.0)
    assert np.all(params.b[8:] == 0.0)
    assert params.head_b == 0.0


def test_init_deterministic():
    cfg = ModelConfig(d_dyn=5, hidden_size=8, use_embedding=True, num_basins=3, embedding_dim=4)
    a = init_params(cfg, seed=9)
    b = init_params(cfg, seed=9)
    assert a.flatten().tobytes() == b.flatten().tobytes()
    c = init_params(cfg, seed=10)
    assert a.flatten().tobytes() != c.flatten().tobytes()


def test_init_bound_h256():
    cfg = ModelConfig(d_dyn=5, hidden_size=256)
    params = init_params(cfg, seed=3)
    assert np.all(np.abs(params.w_ih) < 1.0 / 16.0)
    assert np.all(np.abs(params.w_hh) < 1.0 / 16.0)
    assert np.all(np.abs(params.head_w) < 1.0 / 16.0)


def test_init_embedding_bound():
    cfg = ModelConfig(d_dyn=5, hidden_size=4, use_embedding=True, num_basins=10, embedding_dim=16)
    params = init_params(cfg, seed=3)
    assert params.embed.shape == (10, 16)
    assert np.all(np.abs(params.embed) < 0.25)


# --- assembly ---------------------------------------------------------------


def test_assemble_identity_without_extras():
    cfg = ModelConfig(d_dyn=5, hidden_size=2)
    params = init_params(cfg, seed=0)
    window = np.arange(15.0).reshape(3, 5)
    out = assemble_input(_sample(window), params, cfg)
    assert np.array_equal(out, window)


def test_assemble_full_width():
    # 5 dynamic + 27 static + 20 embedding = 52 columns
    cfg = ModelConfig(
        d_dyn=5,
        hidden_size=2,
        d_static=27,
        embedding_dim=20,
        num_basins=4,
        use_static=True,
        use_embedding=True,
    )
    params = init_params(cfg, seed=1)
    sample = _sample(np.ones((3, 5)), basin_index=2, static=np.arange(27.0))
    out = assemble_input(sample, params, cfg)
    assert out.shape == (3, 52)
    assert np.array_equal(out[:, 5:32], np.tile(np.arange(27.0), (3, 1)))
    assert np.array_equal(out[0, 32:], params.embed[2])
    assert np.array_equal(out[1, 32:], out[0, 32:])  # identical on every row


def test_assemble_same_basin_same_embedding():
    cfg = ModelConfig(d_dyn=5, hidden_size=2, embedding_dim=3, num_basins=2, use_embedding=True)
    params = init_params(cfg, seed=2)
    a = assemble_input(_sample(np.zeros((2, 5)), basin_index=1), params, cfg)
    b = assemble_input(_sample(np.ones((2, 5)), basin_index=1), params, cfg)
    assert np.array_equal(a[:, 5:], b[:, 5:])


def test_assemble_rejects_bad_basin_index():
    cfg = ModelConfig(d_dyn=5, hidden_size=2, embedding_dim=3, num_basins=2, use_embedding=True)
    params = init_params(cfg, seed=2)
    with pytest.raises(BasinIndexOutOfRange):
        assemble_input(_sample(np.zeros((2, 5)), basin_index=5), params, cfg)


# --- forward ------------------------------------------------------------------


def test_forward_all_zero_params():
    cfg = ModelConfig(d_dyn=5, hidden_size=4, dropout_rate=0.0)
    params = ModelParams(
        w_ih=np.zeros((16, 5)),
        w_hh=np.zeros((16, 4)),
        b=np.zeros(16),
        head_w=np.zeros(4),
        head_b=0.0,
        embed=np.zeros((0, 0)),
    )
    pred, _ = forward(np.random.default_rng(0).normal(size=(7, 5)), params, cfg)
    assert pred == 0.0


def test_forward_hand_case_scalar_lstm():
    # T=1, H=1, D=1; all weights 0, candidate bias = atanh(0.5):
    # i = f = o = sigmoid(0) = 0.5, g = 0.5
    # c1 = 0.5 * 0 + 0.5 * 0.5 = 0.25
    # h1 = 0.5 * tanh(0.25)
    cfg = ModelConfig(d_dyn=1, hidden_size=1, dropout_rate=0.0)
    params = ModelParams(
        w_ih=np.zeros((4, 1)),
        w_hh=np.zeros((4, 1)),
        b=np.array([0.0, 0.0, math.atanh(0.5), 0.0]),
        head_w=np.array([2.0]),
        head_b=0.0,
        embed=np.zeros((0, 0)),
    )
    pred, tape = forward(np.array([[3.0]]), params, cfg)
    h1 = 0.5 * math.tanh(0.25)
    assert tape.c_states[0, 1, 0] == pytest.approx(0.25, abs=1e-15)
    assert tape.h_states[0, 1, 0] == pytest.approx(h1, abs=1e-15)
    assert h1 == pytest.approx(0.12245, abs=1e-5)
    assert pred == pytest.approx(2.0 * h1, abs=1e-15)


def test_forward_dropout_all_ones_mask_scales_head():
    cfg = ModelConfig(d_dyn=5, hidden_size=6, dropout_rate=0.4)
    params = init_params(cfg, seed=4)
    window = np.random.default_rng(1).normal(size=(9, 5))
    eval_pred, _ = forward(window, params, cfg)
    train_pred, _ = forward(window, params, cfg, dropout_mask=np.ones(6))
    assert train_pred == pytest.approx(eval_pred / (1.0 - 0.4), rel=1e-12)


def test_forward_eval_mode_bitwise_repeatable():
    cfg = ModelConfig(d_dyn=5, hidden_size=8, dropout_rate=0.4)
    params = init_params(cfg, seed=5)
    window = np.random.default_rng(2).normal(size=(20, 5))
    a, _ = forward(window, params, cfg)
    b, _ = forward(window, params, cfg)
    assert a == b  # bitwise


def test_forward_hidden_state_bounded():
    cfg = ModelConfig(d_dyn=5, hidden_size=16)
    params = init_params(cfg, seed=6)
    window = np.random.default_rng(3).normal(size=(50, 5)) * 100.0
    _, tape = forward(window, params, cfg)
    assert np.all(np.abs(tape.h_states) <= 1.0)


def test_forward_nonfinite_raises():
    cfg = ModelConfig(d_dyn=5, hidden_size=2)
    params = init_params(cfg, seed=7)
    window = np.full((4, 5), np.nan)
    with pytest.raises(NonFiniteActivation):
        forward(window, params, cfg)


# --- backward -----------------------------------------------------------------


def test_backward_zero_upstream():
    cfg = ModelConfig(d_dyn=5, hidden_size=4, embedding_dim=2, num_basins=2, use_embedding=True)
    params = init_params(cfg, seed=8)
    sample = _sample(np.random.default_rng(4).normal(size=(6, 5)), basin_index=1)
    window = assemble_input(sample, params, cfg)
    _, tape = forward(window, params, cfg, basin_index=1)
    grads, d_input = backward(tape, 0.0, params, cfg)
    assert np.all(grads.flatten() == 0.0)
    assert np.all(d_input == 0.0)


def test_backward_linearity_in_upstream():
    cfg = ModelConfig(d_dyn=5, hidden_size=4)
    params = init_params(cfg, seed=9)
    window = np.random.default_rng(5).normal(size=(6, 5))
    _, tape1 = forward(window, params, cfg)
    _, tape2 = forward(window, params, cfg)
    g1, d1 = backward(tape1, 0.7, params, cfg)
    g2, d2 = backward(tape2, 1.4, params, cfg)
    assert np.allclose(2.0 * g1.flatten(), g2.flatten(), rtol=1e-12, atol=1e-15)
    assert np.allclose(2.0 * d1, d2, rtol=1e-12, atol=1e-15)


def test_backward_tape_reuse_rejected():
    cfg = ModelConfig(d_dyn=5, hidden_size=2)
    params = init_params(cfg, seed=10)
    _, tape = forward(np.zeros((3, 5)), params, cfg)
    backward(tape, 1.0, params, cfg)
    with pytest.raises(TapeReuse):
        backward(tape, 1.0, params, cfg)


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def _fd_max_rel_err(config, t_len, seed, with_mask):
    """End-to-end loss gradient vs central differences (h = 1e-6)."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    n_basins = max(1, config.num_basins)
    samples = _random_samples(rng, config, count=4, t_len=t_len)
    mask = None
    if with_mask:
        mask = (rng.random(config.hidden_size) > config.dropout_rate).astype(np.float64)
    loss_cfg = LossConfig(
        basin_flow_std=np.abs(rng.normal(size=n_basins)) + 0.3, epsilon=0.1
    )
    targets = np.array([s.target for s in samples])

    def loss_at(p):
        inputs, idx = assemble_batch(samples, p, config)
        preds, _ = forward_batch(inputs, p, config, mask, idx)
        value, _ = nse_star_loss(preds, targets, idx, loss_cfg)
        return value

    inputs, idx = assemble_batch(samples, params, config)
    preds, tape = forward_batch(inputs, params, config, mask, idx)
    _, d_pred = nse_star_loss(preds, targets, idx, loss_cfg)
    grads, _ = backward_batch(tape, d_pred, params, config)
    analytic = grads.flatten()

    flat = params.flatten()
    h = 1e-6
    worst = 0.0
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        numeric = (
            loss_at(ModelParams.from_flat(up, like=params))
            - loss_at(ModelParams.from_flat(down, like=params))
        ) / (2.0 * h)
        worst = max(worst, _rel_err(analytic[i], numeric))
    return worst


@pytest.mark.parametrize(
    "use_static,use_embedding,hidden,t_len",
    [
        (False, False, 2, 3),
        (False, False, 4, 12),
        (True, False, 4, 3),
        (True, False, 8, 12),
        (False, True, 2, 12),
        (False, True, 8, 3),
        (True, True, 4, 12),
        (True, True, 8, 3),
    ],
)
def test_gradients_match_finite_differences(use_static, use_embedding, hidden, t_len):
    cfg = ModelConfig(
        d_dyn=2,
        hidden_size=hidden,
        embedding_dim=2,
        num_basins=3,
        d_static=3 if use_static else 0,
        dropout_rate=0.4,
        use_static=use_static,
        use_embedding=use_embedding,
    )
    err = _fd_max_rel_err(cfg, t_len, seed=hidden * 100 + t_len, with_mask=(t_len % 2 == 0))
    assert err < 1e-4


def test_embedding_gradient_zero_for_absent_basins():
    cfg = ModelConfig(d_dyn=3, hidden_size=4, embedding_dim=2, num_basins=6, use_embedding=True)
    params = init_params(cfg, seed=11)
    rng = np.random.default_rng(6)
    samples = [
        _sample(rng.normal(size=(5, 3)), basin_index=b, target=1.0) for b in (1, 4, 4)
    ]
    inputs, idx = assemble_batch(samples, params, cfg)
    preds, tape = forward_batch(inputs, params, cfg, None, idx)
    grads, _ = backward_batch(tape, np.ones(3), params, cfg)
    present = {1, 4}
    for b in range(6):
        if b in present:
            assert np.any(grads.embed[b] != 0.0)
        else:
            assert np.all(grads.embed[b] == 0.0)


def test_embedding_as_static_bitwise_equivalence():
    # feeding the embedding rows through the static pathway must give the
    # exact same assembled inputs, hence bitwise-identical predictions
    rng = np.random.default_rng(7)
    k = 4
    cfg_embed = ModelConfig(
        d_dyn=5, hidden_size=6, embedding_dim=k, num_basins=3, use_embedding=True
    )
    params = init_params(cfg_embed, seed=12)
    cfg_static = ModelConfig(d_dyn=5, hidden_size=6, d_static=k, use_static=True)
    params_static = ModelParams(
        w_ih=params.w_ih,
        w_hh=params.w_hh,
        b=params.b,
        head_w=params.head_w,
        head_b=params.head_b,
        embed=np.zeros((0, 0)),
    )
    for basin in range(3):
        window = rng.normal(size=(8, 5))
        pred_e, _ = forward(
            assemble_input(_sample(window, basin_index=basin), params, cfg_embed),
            params,
            cfg_embed,
        )
        pred_s, _ = forward(
            assemble_input(
                _sample(window, basin_index=0, static=params.embed[basin]),
                params_static,
                cfg_static,
            ),
            params_static,
            cfg_static,
        )
        assert pred_e == pred_s  # bitwise


# --- params plumbing ------------------------------------------------------------


def test_flatten_round_trip():
    cfg = ModelConfig(
        d_dyn=5,
        hidden_size=3,
        d_static=2,
        embedding_dim=2,
        num_basins=4,
        use_static=True,
        use_embedding=True,
    )
    params = init_params(cfg, seed=13)
    flat = params.flatten()
    assert flat.size == params.num_params
    back = ModelParams.from_flat(flat, like=params)
    assert back.flatten().tobytes() == flat.tobytes()
    assert back.head_b == params.head_b


def test_flatten_canonical_order():
    params = ModelParams(
        w_ih=np.array([[1.0, 2.0]]),
        w_hh=np.array([[3.0]]),
        b=np.array([4.0]),
        head_w=np.array([5.0]),
        head_b=6.0,
        embed=np.array([[7.0, 8.0]]),
    )
    assert params.flatten().tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]


def test_dropout_mask_distribution():
    rng = Xoshiro256StarStar(21)
    keep = 0
    n = 20000
    for _ in range(n // 100):
        mask = draw_dropout_mask(rng, 100, 0.4)
        assert set(np.unique(mask)).issubset({0.0, 1.0})
        keep += int(mask.sum())
    assert abs(keep / n - 0.6) < 0.02
