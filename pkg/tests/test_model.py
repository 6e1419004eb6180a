import json
import math

import numpy as np
import pytest

from binet import functional as F
from binet.bitpack import PackedConv, float_sign_conv_reference, packed_conv2d
from binet.data import synth_dataset
from binet.dte import Estimator, EstimatorState
from binet.imb import binarize_weights, sign
from binet.model import (
    Conv2d,
    Linear,
    ModelSpec,
    build_model,
    cnn4,
    mlp,
    resnet20,
    sign_flip_rate,
    vgg_small,
    zoo_spec,
)
from binet.tensor import Tensor, backward
from binet.train import (
    DatasetSplit,
    TrainSettings,
    Trainer,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

from gradcheck import rel_error


def _est(t=1.0, mode="dte"):
    e = Estimator(mode)
    e.set_state(EstimatorState.from_t(t))
    return e


# -- forward_train ---------------------------------------------------------------
def test_forward_example_pair_kernel():
    layer = Conv2d("c", 1, 2, kernel=1, binary=True, estimator=_est())
    a = 0.37
    layer.weight.data[...] = np.array([-a, a], np.float32).reshape(2, 1, 1, 1)
    out = layer.forward(Tensor(np.ones((1, 1, 2, 2))), training=True).data
    assert np.array_equal(out[0, :, 0, 0], [-1.0, 1.0])


def test_forward_outputs_are_integer_multiples_of_shift():
    rng = np.random.default_rng(0)
    layer = Conv2d("c", 3, 4, kernel=3, padding=1, binary=True, estimator=_est(), rng=rng)
    layer.weight.data *= 1e-3  # shift stays near 0 after standardization; exercise any s
    out = layer.forward(Tensor(rng.standard_normal((2, 3, 5, 5))), training=True).data.astype(np.float64)
    s = binarize_weights(layer.weight.data).shift
    ints = np.ldexp(out, -s)
    assert np.array_equal(ints, np.round(ints))
    assert np.max(np.abs(ints)) <= 27


@pytest.mark.parametrize("seed", range(10))
def test_forward_equals_packed_execution(seed):
    rng = np.random.default_rng(seed)
    c, o = int(rng.integers(1, 70)), int(rng.integers(1, 9))
    k, s, p = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    layer = Conv2d("c", c, o, kernel=k, stride=s, padding=p, binary=True, estimator=_est(), rng=rng)
    layer.weight.data *= np.float32(2.0 ** rng.integers(-8, 8))
    x = rng.standard_normal((2, c, 6, 7)).astype(np.float32)
    train_out = layer.forward(Tensor(x), training=True).data
    q = layer.quantize()
    packed = packed_conv2d(sign(x).astype(np.int8), PackedConv.from_signs(q.signs, q.shift, s, p))
    assert np.array_equal(train_out.astype(np.float64), packed.astype(np.float64))
    assert np.array_equal(packed.astype(np.float64), float_sign_conv_reference(sign(x), q.signs, q.shift, s, p))


def test_quantized_weights_match_training_forward():
    rng = np.random.default_rng(4)
    layer = Linear("l", 10, 3, binary=True, estimator=_est(), rng=rng)
    q = layer.quantize()
    w_used = layer.binary_weight().data
    assert np.array_equal(w_used, q.dequantize(np.float32))


# -- backward_train --------------------------------------------------------------
def test_identity_estimator_equals_sign_replaced_conv():
    rng = np.random.default_rng(1)
    layer = Conv2d("c", 3, 4, kernel=3, padding=1, binary=True, binarizer="vanilla", estimator=_est(mode="identity"), rng=rng)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
    r = Tensor(rng.standard_normal((2, 4, 5, 5)))
    backward((layer.forward(x, True) * r).sum())
    # reference: conv on hard signs with plain gradients
    xs = Tensor(sign(x.data), requires_grad=True)
    ws = Tensor(sign(layer.weight.data), requires_grad=True)
    backward((F.conv2d(xs, ws, 1, 1) * r).sum())
    assert np.allclose(layer.weight.grad, ws.grad, rtol=1e-6, atol=1e-6)
    assert np.allclose(x.grad, xs.grad, rtol=1e-6, atol=1e-6)


def test_imb_weight_gradient_carries_shift_and_derivative():
    rng = np.random.default_rng(2)
    layer = Linear("l", 6, 3, binary=True, estimator=_est(t=2.0), rng=rng)
    layer.weight.data *= 50.0
    x = Tensor(rng.standard_normal((4, 6)))
    r = rng.standard_normal((4, 3))
    backward((layer.forward(x, True) * Tensor(r)).sum())
    q = binarize_weights(layer.weight.data)
    w_hat = layer.weights_std()
    upstream = r.T @ sign(x.data)  # dL/dQ_w
    expected = upstream * layer.estimator.derivative(w_hat) * 2.0**q.shift
    np.testing.assert_allclose(layer.weight.grad, expected, rtol=1e-5, atol=1e-6)


def test_zero_derivative_gives_zero_weight_gradient():
    layer = Linear("l", 4, 2, binary=True, estimator=_est())
    layer.estimator.derivative = lambda x: np.zeros_like(np.asarray(x))
    backward((layer.forward(Tensor(np.ones((3, 4))), True)).sum())
    assert np.all(layer.weight.grad == 0)


def _to_float64(net):
    for _, p in net.named_parameters():
        p.data = p.data.astype(np.float64)


def test_surrogate_network_gradient_matches_finite_differences():
    """With t=1, k=1 the DTE backward is the exact gradient of a tanh-for-sign network."""
    rng = np.random.default_rng(0)
    spec = mlp((1, 1, 6), 3, hidden=8, binarizer="vanilla")
    net = build_model(spec, seed=3, estimator={"mode": "dte"}, surrogate=True)
    for e in net.estimators().values():
        e.set_state(EstimatorState.from_t(1.0))
    _to_float64(net)
    x = rng.standard_normal((16, 1, 1, 6))
    y = rng.integers(0, 3, 16)

    def loss_value():
        return float(F.cross_entropy(net.forward(Tensor(x, dtype=np.float64), training=True), y).data)

    for p in net.parameters():
        p.grad = None
    backward(F.cross_entropy(net.forward(Tensor(x, dtype=np.float64), training=True), y))
    h = 1e-3
    worst = 0.0
    for name, p in net.named_parameters():
        num = np.zeros_like(p.data)
        for i in np.ndindex(p.shape):
            old = p.data[i]
            p.data[i] = old + h
            fp = loss_value()
            p.data[i] = old - h
            fm = loss_value()
            p.data[i] = old
            num[i] = (fp - fm) / (2 * h)
        worst = max(worst, rel_error(p.grad, num))
    assert worst <= 1e-3


# -- training --------------------------------------------------------------------
def test_binary_mlp_learns_separable_data():
    tr, te = synth_dataset("two-gaussians", seed=0)
    net, hist = train(mlp(), tr, te, TrainSettings(epochs=20, seed=0))
    assert len(hist) == 20
    assert hist[-1].train_acc >= 0.95
    assert evaluate(net, tr)[0] >= 0.95


def test_training_is_deterministic():
    tr, te = synth_dataset("patterns", seed=1, n_train=256, n_test=128)
    runs = []
    for _ in range(2):
        net, hist = train(cnn4((1, 8, 8), 4, width=4), tr, te, TrainSettings(epochs=3, seed=5))
        runs.append(([r.csv_row() for r in hist], [p.data.copy() for p in net.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_metrics_record_fields():
    tr, te = synth_dataset("patterns", seed=1, n_train=256, n_test=128)
    _, hist = train(cnn4((1, 8, 8), 4, width=4), tr, te, TrainSettings(epochs=2, seed=0))
    rec = hist[-1]
    assert rec.epoch == 1
    assert set(rec.layers) == {"bconv1", "bconv2"}
    for d in rec.layers.values():
        for key in ("entropy", "p_plus", "t", "k", "updatable_fraction", "sign_flip_rate", "error_l1", "error_l2"):
            assert math.isfinite(d[key])
        assert d["entropy"] >= 0.95 * math.log(2)
        assert d["grad_nonzero"] > 0
    json.loads(rec.to_json())
    assert len(rec.csv_header()) == len(rec.csv_row())


def test_active_region_keeps_updatable_fraction():
    tr, te = synth_dataset("patterns", seed=2, n_train=512, n_test=128)
    est = {"mode": "dte", "clamp_mode": "active-region", "epsilon": 0.1}
    _, hist = train(cnn4((1, 8, 8), 4, width=4), tr, te, TrainSettings(epochs=10, seed=0), est)
    assert min(r.layers[n]["updatable_fraction"] for r in hist for n in r.layers) >= 0.10


def test_shape_mismatch_rejected_before_training():
    tr, te = synth_dataset("patterns", seed=0, n_train=64, n_test=32)
    net = build_model(cnn4((1, 10, 10), 4, width=4))
    with pytest.raises(ValueError):
        Trainer(net, TrainSettings(epochs=1)).fit(tr, te)


# -- evaluate ---------------------------------------------------------------------
def test_constant_predictor_on_balanced_data():
    labels = np.repeat(np.arange(10), 10)
    split = DatasetSplit(np.zeros((100, 1, 8, 8), np.float32), labels, 10)
    net = build_model(cnn4((1, 8, 8), 10, width=4))
    fc = net.weight_layers()[-1]
    fc.weight.data[...] = 0
    assert evaluate(net, split)[0] == pytest.approx(0.1)


def test_untrained_nets_are_at_chance():
    rng = np.random.default_rng(0)
    split = DatasetSplit(rng.standard_normal((2000, 1, 8, 8)).astype(np.float32), rng.integers(0, 10, 2000), 10)
    for binary in (True, False):
        net = build_model(cnn4((1, 8, 8), 10, width=4), seed=1)
        if not binary:
            for l in net.weight_layers():
                l.binary = False
        assert abs(evaluate(net, split)[0] - 0.1) < 0.04


# -- spec and zoo -------------------------------------------------------------------
@pytest.mark.parametrize(
    "spec",
    [cnn4(), mlp(), vgg_small(width=8), resnet20(width=4)],
    ids=["cnn4", "mlp", "vgg_small", "resnet20"],
)
def test_zoo_first_last_full_precision(spec):
    spec.validate()
    layers = spec.param_layers()
    assert not layers[0].get("binary") and not layers[-1].get("binary")
    assert any(d.get("binary") for d in layers)
    net = build_model(spec)
    assert net.predict_logits(np.zeros((2,) + spec.input_shape, np.float32)).shape == (2, spec.num_classes)


def test_spec_json_round_trip_and_validation():
    spec = resnet20(width=4)
    assert ModelSpec.from_json(spec.to_json()) == spec
    bad = cnn4()
    bad.layers[0]["binary"] = True
    with pytest.raises(ValueError):
        bad.validate()
    with pytest.raises(ValueError):
        zoo_spec("nope", (1, 28, 28), 10)


def test_sign_flip_rate_examples():
    a = np.array([1, -1, 1, 1], np.int8)
    assert sign_flip_rate(a, a) == 0.0
    assert sign_flip_rate(a, -a) == 1.0
    with pytest.raises(ValueError):
        sign_flip_rate(a, a[:2])


@pytest.mark.slow
def test_standardized_training_flips_fewer_signs(mnist_loader):
    """Ablation on the desk CNN: same estimator, with and without standardization."""
    tr, te = mnist_loader(5000, 500)
    rates = {}
    for binarizer in ("imb", "vanilla"):
        net = build_model(cnn4(binarizer=binarizer), 0, {"mode": "dte"})
        hist = Trainer(net, TrainSettings(epochs=10, seed=0)).fit(tr, te)
        rates[binarizer] = float(np.mean([[d["sign_flip_rate"] for d in r.layers.values()] for r in hist]))
    print(f"mean sign-flip rate: {rates}")
    assert rates["imb"] < rates["vanilla"]


def test_checkpoint_round_trip_resumes_identically():
    tr, te = synth_dataset("patterns", seed=3, n_train=256, n_test=64)
    spec = cnn4((1, 8, 8), 4, width=4)
    settings = TrainSettings(epochs=4, seed=1)
    ref = Trainer(build_model(spec, 1), settings)
    ref.fit(tr, te)
    part = Trainer(build_model(spec, 1), settings)
    part.run_epoch(tr, te)
    part.run_epoch(tr, te)
    resumed, header = load_checkpoint(save_checkpoint(part, {"note": "x"}))
    assert header["extra"] == {"note": "x"} and resumed.epoch == 2
    resumed.fit(tr, te)
    for a, b in zip(ref.net.parameters(), resumed.net.parameters()):
        assert np.array_equal(a.data, b.data)
    assert ref.history[-1].csv_row()[1:] == resumed.history[-1].csv_row()[1:]
