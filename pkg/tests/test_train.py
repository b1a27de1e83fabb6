import numpy as np
import pytest

from polykerv.checkpoint import load_checkpoint, save_checkpoint
from polykerv.data import synthetic_spirals
from polykerv.errors import ConfigurationError
from polykerv.netspec import LayerSpec, NetworkSpec, surgery
from polykerv.network import Network, transplant
from polykerv.train import TrainSettings, train_model
from polykerv.zoo import build


def small_data():
    train = synthetic_spirals(30, classes=3, noise_sd=0.1, seed=0, split="train")
    val = synthetic_spirals(15, classes=3, noise_sd=0.1, seed=99, split="test")
    return train, val


def deep_chain_spec(depth=12, channels=4, size=8):
    """Plain conv/relu chain; surgery turns it into a deep kernel stack."""
    layers = []
    cin = 1
    for i in range(1, depth + 1):
        layers.append(
            LayerSpec(
                "conv2d",
                f"conv{i}",
                {"in_channels": cin, "out_channels": channels, "kernel": 3, "stride": 1, "padding": 1},
            )
        )
        layers.append(LayerSpec("relu", f"act{i}", {}))
        cin = channels
    layers.append(LayerSpec("flatten", "flatten", {}))
    layers.append(LayerSpec("linear", "fc", {"in_features": channels * size * size, "out_features": 3}))
    return NetworkSpec(input_shape=(1, size, size), num_classes=3, layers=layers)


def test_zero_epochs_changes_nothing():
    train, val = small_data()
    spec = build("cnn3", 0.25, 3, (1, 16, 16))
    net = Network.build(spec, seed=0)
    before = net.state_arrays()
    result = train_model(net, train, val, TrainSettings(epochs=0, batch_size=16, seed=0))
    assert result.records == []
    for k, v in net.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_reduces_loss_and_reports_metrics():
    train, val = small_data()
    spec = build("cnn3", 0.5, 3, (1, 16, 16))
    net = Network.build(spec, seed=0)
    settings = TrainSettings(optimizer="adam", lr=1e-3, epochs=8, batch_size=16, seed=0, run_id="t")
    result = train_model(net, train, val, settings)
    assert not result.diverged
    assert len(result.records) == 8
    assert result.records[-1].train_loss < result.records[0].train_loss
    assert all(r.grad_norm_mean > 0 for r in result.records)
    assert all(r.lrs == [1e-3] for r in result.records)
    assert result.best_state is not None


def test_metrics_replay_is_bitwise_identical():
    def run():
        train, val = small_data()
        net = Network.build(build("cnn3", 0.5, 3, (1, 16, 16)), seed=3)
        settings = TrainSettings(optimizer="adam", lr=1e-3, epochs=4, batch_size=16, seed=3, run_id="replay")
        return train_model(net, train, val, settings)

    lines_a = [r.to_json_line() for r in run().records]
    lines_b = [r.to_json_line() for r in run().records]
    assert lines_a == lines_b


def test_momo_taus_recorded_and_bounded():
    train, val = small_data()
    net = Network.build(build("cnn3", 0.25, 3, (1, 16, 16)), seed=1)
    settings = TrainSettings(optimizer="momo_adam", lr=0.01, epochs=3, batch_size=16, seed=1)
    result = train_model(net, train, val, settings)
    assert result.taus, "momo runs must record step sizes"
    assert all(0.0 <= t <= 0.01 for t in result.taus)
    assert all(r.tau_mean is not None for r in result.records)


def test_plateau_scheduler_reduces_lr_in_training():
    train, val = small_data()
    net = Network.build(build("cnn3", 0.25, 3, (1, 16, 16)), seed=1)
    settings = TrainSettings(
        optimizer="sgd",
        lr=1e-5,  # too small to improve anything, so the metric plateaus
        momentum=0.0,
        epochs=6,
        batch_size=32,
        seed=1,
        scheduler="plateau",
        scheduler_args={"patience": 1, "factor": 0.1, "mode": "max"},
    )
    result = train_model(net, train, val, settings)
    lrs = [min(r.lrs) for r in result.records]
    assert lrs[0] == 1e-5
    assert lrs[-1] < 1e-5
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_deep_kernel_chain_diverges_but_react_completes():
    train, val = small_data()
    base = deep_chain_spec(depth=12, size=16)

    pkn = surgery(base, "pkn", degree=2, shift=0.5)
    net = Network.build(pkn, seed=0)
    settings = TrainSettings(optimizer="adam", lr=3e-4, epochs=2, batch_size=16, seed=0)
    result = train_model(net, train, val, settings)
    assert result.diverged
    assert result.records[-1].nan_flag
    assert result.diverged_location is not None

    react = surgery(base, "react")
    net2 = Network.build(react, seed=0)
    result2 = train_model(net2, train, val, settings)
    assert not result2.diverged
    assert len(result2.records) == 2


def test_divergence_reports_step_and_location():
    train, val = small_data()
    spec = build("cnn3", 0.25, 3, (1, 16, 16))
    net = Network.build(spec, seed=0)
    net.params["conv1.weight"].data[:] = np.nan
    result = train_model(net, train, val, TrainSettings(epochs=1, batch_size=16, seed=0))
    assert result.diverged
    assert result.diverged_step == 1
    assert result.diverged_location == "loss"


# -- checkpoints and transplanting ---------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    spec = build("cnn3", 0.25, 3, (1, 16, 16))
    net = Network.build(spec, seed=4)
    opt_state = {"m/conv1.weight": np.ones(3)}
    save_checkpoint(tmp_path / "c.npz", spec, net.params, opt_state, meta={"note": "x"})
    spec2, params, opt, meta = load_checkpoint(tmp_path / "c.npz")
    assert spec2 == spec
    assert meta == {"note": "x"}
    np.testing.assert_array_equal(opt["m/conv1.weight"], np.ones(3))
    for name, t in net.params.items():
        np.testing.assert_array_equal(params[name], t.data)


def test_checkpoint_rejects_newer_format(tmp_path):
    spec = build("cnn3", 0.25, 3, (1, 16, 16))
    net = Network.build(spec, seed=0)
    save_checkpoint(tmp_path / "c.npz", spec, net.params)
    data = dict(np.load(tmp_path / "c.npz"))
    data["format_version"] = np.array([99])
    np.savez(tmp_path / "c2.npz", **data)
    with pytest.raises(ConfigurationError, match="newer"):
        load_checkpoint(tmp_path / "c2.npz")


def test_transplant_into_react_preserves_conv_weights_bitwise():
    spec = build("cnn3", 0.5, 3, (1, 16, 16))
    vanilla = Network.build(spec, seed=7)
    target = surgery(spec, "react")
    params = transplant(vanilla.state_arrays(), target, seed=8)
    for name, t in vanilla.params.items():
        np.testing.assert_array_equal(params[name].data, t.data)
    assert params["act1.coef2"].data[0] == np.float32(0.009)


def test_transplant_into_pkn_keeps_weights_inits_shift():
    spec = build("cnn3", 0.5, 3, (1, 16, 16))
    vanilla = Network.build(spec, seed=7)
    target = surgery(spec, "pkn", degree=2, shift=0.5)
    params = transplant(vanilla.state_arrays(), target, seed=8)
    np.testing.assert_array_equal(params["conv1.weight"].data, vanilla.params["conv1.weight"].data)
    np.testing.assert_array_equal(params["conv1.bias"].data, vanilla.params["conv1.bias"].data)
    assert params["conv1.shift"].data[0] == np.float32(0.5)


def test_transplant_class_count_mismatch_lists_parameters():
    src = Network.build(build("cnn3", 0.5, 3, (1, 16, 16)), seed=0).state_arrays()
    target = build("cnn3", 0.5, 4, (1, 16, 16))
    with pytest.raises(ConfigurationError, match="fc.weight"):
        transplant(src, target, seed=0)
