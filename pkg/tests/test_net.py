import numpy as np
import pytest

from ddsr import net
from gradcheck import block_errors, numeric_gradient, tiny_setup


def weighted_nll_head(x0, w):
    def head(probs, logits):
        z = logits - logits.max(-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        tok = np.take_along_axis(logp, x0[..., None], -1)[..., 0]
        loss = -(w * tok).sum(-1)
        g = probs.copy()
        np.put_along_axis(g, x0[..., None], np.take_along_axis(g, x0[..., None], -1) - 1.0, -1)
        return loss, g * w[..., None]

    return head


def test_positional_encoding_values():
    for t in (0, 3, 17):
        pe = net.positional_encoding(0, t, 8)
        assert pe[0] == 0.0 and pe[1] == 1.0
    for l in (0, 5):
        assert net.positional_encoding(l, 0, 8)[4] == 0.0
    assert abs(net.positional_encoding(1, 0, 8)[0] - 0.841471) < 1e-6
    with pytest.raises(ValueError):
        net.positional_encoding(1, 1, 7)
    with pytest.raises(ValueError):
        net.NetConfig(M=4, d=5, E=15)


def test_forward_shapes_and_rows():
    rng, params, X, t, _, _ = tiny_setup()
    probs = net.forward(params, X, t)
    assert probs.shape == X.shape
    assert np.all(probs > 0)
    assert np.allclose(probs.sum(-1), 1.0, atol=1e-6)
    assert net.forward(params, X, t).tobytes() == probs.tobytes()
    with pytest.raises(ValueError):
        net.forward(params, X[:, :-1], t)
    with pytest.raises(ValueError):
        net.forward(params, X, np.full(X.shape[0], 99))


def test_masked_rows_differ_only_through_positions():
    rng = np.random.default_rng(1)
    cfg = net.NetConfig(M=4, d=6, E=4, F=8)
    params = net.init_params(cfg, rng)
    X = np.zeros((1, 4, 6))
    X[0, 0, 2] = 1.0
    X[0, 3, 1] = 1.0  # rows 1 and 2 masked
    no_pe = net.forward(params, X, [2], positional=False)[0]
    assert np.allclose(no_pe[1], no_pe[2], atol=1e-14)
    with_pe = net.forward(params, X, [2])[0]
    assert not np.allclose(with_pe[1], with_pe[2])


def test_model_matches_float64_forward():
    rng, params, X, t, _, _ = tiny_setup()
    model = net.Model(params, chunk=2)
    assert np.allclose(model(X, t), net.forward(params, X, t), atol=1e-5)


def test_masked_only_model_matches_on_masked_rows():
    _, params, X, t, _, _ = tiny_setup()
    rows = ~X.any(-1)
    full = net.Model(params, dtype=np.float64, chunk=2)(X, t)
    part = net.Model(params, dtype=np.float64, chunk=2, masked_only=True)(X, t)
    assert np.allclose(part[rows], full[rows], atol=1e-12)
    assert np.allclose(part[~rows], 1.0 / X.shape[-1])


def test_gradient_matches_finite_differences():
    rng, params, X, t, x0, masked = tiny_setup()
    w = rng.normal(size=x0.shape)
    head = weighted_nll_head(x0, w)
    _, grads = net.loss_and_gradient(params, X, t, head)
    numeric = numeric_gradient(params, X, t, head)
    errs = block_errors(grads, numeric)
    assert set(errs) == set(params.arrays)
    bad = {k: v for k, v in errs.items() if v > 1e-4}
    assert not bad, bad
    # key biases shift every attention logit of a query equally
    for k in ("enc_att_kb", "dec_self_kb", "dec_cross_kb"):
        assert np.linalg.norm(grads[k]) < 1e-12


def test_zero_weights_give_zero_gradient():
    rng, params, X, t, x0, _ = tiny_setup()
    _, grads = net.loss_and_gradient(params, X, t, weighted_nll_head(x0, np.zeros(x0.shape)))
    assert all(not g.any() for g in grads.values())


def test_duplicated_batch_doubles_gradient():
    rng, params, X, t, x0, _ = tiny_setup(n=2)
    w = np.ones(x0.shape)
    _, g1 = net.loss_and_gradient(params, X, t, weighted_nll_head(x0, w))
    X2, t2, x02 = np.concatenate([X, X]), np.concatenate([t, t]), np.concatenate([x0, x0])
    _, g2 = net.loss_and_gradient(params, X2, t2, weighted_nll_head(x02, np.ones(x02.shape)))
    for k in g1:
        assert np.allclose(g2[k], 2 * g1[k], rtol=1e-10, atol=1e-12)


def test_non_finite_loss_names_the_index():
    rng, params, X, t, x0, _ = tiny_setup()

    def head(probs, logits):
        loss = np.zeros(X.shape[0])
        loss[1] = np.nan
        return loss, np.zeros_like(logits)

    with pytest.raises(net.NonFiniteLoss) as info:
        net.loss_and_gradient(params, X, t, head)
    assert info.value.index == 1


def test_adam_zero_gradient_and_first_step():
    rng, params, *_ = tiny_setup()
    state = net.AdamState.for_params(params)
    zero = net.zeros_like(params)
    p1, s1 = net.adam_step(params, zero, state)
    assert s1.step == 1
    assert all(np.array_equal(p1[k], params[k]) for k in params.arrays)
    g = {k: np.full_like(v, 0.37) for k, v in params.arrays.items()}
    p2, s2 = net.adam_step(params, g, state)
    for k in params.arrays:
        assert np.allclose(params[k] - p2[k], 1e-4, rtol=1e-6)
    p3, s3 = net.adam_step(params, g, state)
    assert all(np.array_equal(p2[k], p3[k]) for k in params.arrays)
    assert state.step == 0  # inputs are not mutated


def test_checkpoint_round_trip(tmp_path):
    rng, params, *_ = tiny_setup()
    path = tmp_path / "model.ckpt"
    net.save_params(path, params)
    raw = path.read_bytes()
    assert raw[:8] == b"DDSRCKPT"
    back = net.load_params(path)
    assert back.cfg == params.cfg
    assert all(np.array_equal(back[k], params[k]) for k in params.arrays)
    path.write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        net.load_params(path)
    path.write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(ValueError):
        net.load_params(path)


def test_init_is_seeded_and_bounded():
    cfg = net.NetConfig(M=5, d=14)
    a = net.init_params(cfg, np.random.default_rng(3))
    b = net.init_params(cfg, np.random.default_rng(3))
    assert all(np.array_equal(a[k], b[k]) for k in a.arrays)
    assert np.abs(a["enc_ff_w1"]).max() <= 1 / np.sqrt(16)
    assert not a["enc_ff_b1"].any() and np.all(a["enc_ln1_g"] == 1)
