import numpy as np
import pytest

import snulab.autodiff as ad
import snulab.checks
import snulab.data
import snulab.units


def _single_unit(decay=0.8, bias=-1.0, weight=1.0, **kwargs):
    layer = snulab.units.SnuLayer(np.array([[weight]]), decay=decay, bias=bias, **kwargs)
    layer.reset_state(1)
    return layer


def _run(layer, inputs):
    outputs, states = [], []
    with ad.no_grad():
        for x in inputs:
            outputs.append(layer.step(np.array([[x]])).item())
            states.append(layer.state.item())
    return outputs, states


class TestSnuLayer(object):

    def test_integrate_fire_and_reset(self):
        outputs, states = _run(_single_unit(), [1.0, 1.0, 1.0])

        assert outputs == [0.0, 1.0, 0.0]
        assert states == pytest.approx([1.0, 1.8, 1.0])

    def test_worked_trace_spikes_once_and_resets(self):
        layer = _single_unit(weight=0.5)
        outputs, states = [], []
        for _ in range(4):
            outputs.append(snulab.units.snu_step(layer, np.ones((1, 1))).item())
            states.append(layer.state.item())

        assert outputs == [0.0, 0.0, 1.0, 0.0]
        assert states == pytest.approx([0.5, 0.9, 1.22, 0.5])

    def test_zero_input_stays_quiet(self):
        layer = _single_unit(weight=0.5)
        outputs, states = _run(layer, [0.0] * 20)

        assert outputs == [0.0] * 20
        assert states == [0.0] * 20

    def test_ssnu_two_step_unroll(self):
        layer = _single_unit(decay=1.0, bias=0.0, output_fn=snulab.units.OUTPUT_SIGMOID)
        with ad.no_grad():
            y1 = snulab.units.ssnu_step(layer, np.ones((1, 1))).item()
            s1 = layer.state.item()
            y2 = snulab.units.ssnu_step(layer, np.ones((1, 1))).item()
            s2 = layer.state.item()

        assert s1 == 1.0
        assert y1 == pytest.approx(0.7310586)
        assert s2 == pytest.approx(1.2689414)
        assert y2 == pytest.approx(0.7805615, abs=1e-7)

    def test_reset_to_input_after_spike(self):
        layer = _single_unit(decay=0.9, bias=-0.5)
        outputs, states = _run(layer, [2.0, 0.3])

        assert outputs[0] == 1.0
        assert states[1] == pytest.approx(0.3)

    def test_integrate_and_fire_is_monotone(self):
        layer = _single_unit(decay=1.0, bias=-1000.0)
        rng = np.random.default_rng(0)
        _, states = _run(layer, rng.random(200))

        assert all(b >= a for a, b in zip(states, states[1:]))

    def test_relu_state_is_non_negative(self):
        layer = snulab.units.SnuLayer(np.random.default_rng(1).normal(size=(5, 7)))
        layer.reset_state(3)
        rng = np.random.default_rng(2)
        with ad.no_grad():
            for _ in range(50):
                layer.step(rng.random((3, 5)) < 0.5)
                assert np.all(layer.state.data >= 0.0)

    def test_step_needs_reset(self):
        layer = snulab.units.SnuLayer(np.ones((2, 2)))
        with pytest.raises(ad.ContractException, match="reset_state"):
            layer.step(np.ones((1, 2)))

    def test_input_width_mismatch(self):
        layer = _single_unit()
        with pytest.raises(ad.DimensionException):
            layer.step(np.ones((1, 3)))

    def test_ssnu_step_needs_sigmoid_output(self):
        with pytest.raises(ad.ContractException):
            snulab.units.ssnu_step(_single_unit(), np.ones((1, 1)))

    def test_ssnu_output_is_soft(self):
        layer = _single_unit(output_fn=snulab.units.OUTPUT_SIGMOID)
        y = snulab.units.ssnu_step(layer, np.ones((1, 1)))
        assert y.item() == pytest.approx(0.5)

    def test_per_unit_decay_is_trained_and_clipped(self):
        layer = snulab.units.SnuLayer(np.ones((2, 3)), decay=0.5,
                                      decay_mode=snulab.units.DECAY_PER_UNIT)
        names = [name for name, _ in layer.parameters()]
        assert names == ["weight", "bias", "decay"]

        layer.decay.data[:] = [-0.5, 0.5, 1.5]
        layer.constrain()
        np.testing.assert_array_equal(layer.decay.data, [0.0, 0.5, 1.0])

    def test_invalid_decay(self):
        with pytest.raises(snulab.units.NetworkSpecException):
            snulab.units.SnuLayer(np.ones((2, 2)), decay=1.5)

    def test_bptt_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        layer = snulab.units.SnuLayer(
            rng.normal(size=(4, 6)), decay=0.7, output_fn=snulab.units.OUTPUT_SIGMOID,
            decay_mode=snulab.units.DECAY_PER_UNIT)
        inputs = rng.random((8, 2, 4))
        targets = (rng.random((8, 2, 6)) < 0.5) * 1.0

        def fn():
            layer.reset_state(2)
            total = None
            for t in range(8):
                term = ad.loss(ad.OP_BERNOULLI_NLL, layer.step(inputs[t]), targets[t])
                total = term if total is None else total + term
            return total

        tensors = [tensor for _, tensor in layer.parameters()]
        assert ad.gradcheck(fn, tensors) < 1e-6


class TestConvSnuLayer(object):

    def test_output_shape_and_per_map_bias(self):
        layer = snulab.units.ConvSnuLayer(np.ones((4, 1, 3, 3)), (1, 6, 6), padding="same")
        layer.reset_state(2)

        with ad.no_grad():
            out = snulab.units.conv_snu_step(layer, np.ones((2, 1, 6, 6)))

        assert out.shape == (2, 4, 6, 6)
        assert layer.bias.shape == (4, 1, 1)
        assert layer.output_shape == (4, 6, 6)

    def test_identity_kernel_thresholds_pointwise(self):
        layer = snulab.units.ConvSnuLayer(np.ones((1, 1, 1, 1)), (1, 4, 4), decay=0.0, bias=-0.5)
        layer.reset_state(2)
        frames = np.random.default_rng(3).choice([0.1, 0.3, 0.7, 0.9], size=(5, 2, 1, 4, 4))

        with ad.no_grad():
            for x in frames:
                out = snulab.units.conv_snu_step(layer, x)
                np.testing.assert_array_equal(out.data, (x > 0.5) * 1.0)

    def test_zero_kernel_never_spikes(self):
        layer = snulab.units.ConvSnuLayer(np.zeros((2, 1, 3, 3)), (1, 5, 5))
        layer.reset_state(1)
        rng = np.random.default_rng(4)

        with ad.no_grad():
            for _ in range(10):
                out = snulab.units.conv_snu_step(layer, rng.random((1, 1, 5, 5)) * 10.0)
                assert not out.data.any()

    def test_bright_patch_spikes_only_at_centre(self):
        layer = snulab.units.ConvSnuLayer(np.ones((1, 1, 3, 3)), (1, 7, 7), bias=-8.5)
        layer.reset_state(1)
        frame = np.zeros((1, 1, 7, 7))
        frame[0, 0, 2:5, 2:5] = 1.0
        expected = np.zeros((1, 1, 7, 7))
        expected[0, 0, 3, 3] = 1.0

        with ad.no_grad():
            out = snulab.units.conv_snu_step(layer, frame)

        np.testing.assert_array_equal(out.data, expected)

    def test_kernel_channel_mismatch(self):
        with pytest.raises(snulab.units.NetworkSpecException):
            snulab.units.ConvSnuLayer(np.ones((4, 2, 3, 3)), (1, 6, 6))


def _baseline(kind, units=1, bias=None):
    gates = snulab.units.RECURRENT_GATES[kind]
    biases = {gate: np.zeros(units) for gate in gates}
    biases.update(bias or dict())
    return snulab.units.RecurrentBaselineLayer(
        kind,
        {gate: np.zeros((1, units)) for gate in gates},
        {gate: np.zeros((units, units)) for gate in gates},
        biases,
    )


class TestRecurrentBaselineLayer(object):

    def test_rnn_step(self):
        layer = _baseline("rnn", bias=dict(h=np.array([0.5])))
        layer.weights["h"].data[...] = 1.0
        layer.reset_state(1)

        with ad.no_grad():
            h1 = layer.step(np.ones((1, 1))).item()

        assert h1 == pytest.approx(np.tanh(1.5))

    def test_gru_interpolates_towards_candidate(self):
        layer = _baseline("gru", bias=dict(h=np.array([np.arctanh(0.8)])))
        layer.reset_state(1)

        with ad.no_grad():
            hidden = [layer.step(np.zeros((1, 1))).item() for _ in range(2)]

        assert hidden == pytest.approx([0.4, 0.6])

    def test_lstm_accumulates_cell(self):
        layer = _baseline("lstm", bias=dict(g=np.array([np.arctanh(0.6)])))
        layer.reset_state(1)

        with ad.no_grad():
            hidden = [layer.step(np.zeros((1, 1))).item() for _ in range(2)]

        assert hidden == pytest.approx([0.5 * np.tanh(0.3), 0.5 * np.tanh(0.45)])
        assert layer.cell.item() == pytest.approx(0.45)

    def test_missing_gate(self):
        with pytest.raises(snulab.units.NetworkSpecException, match="gates"):
            snulab.units.RecurrentBaselineLayer(
                "gru", {"h": np.zeros((1, 1))}, {"h": np.zeros((1, 1))}, {"h": np.zeros(1)})

    def test_step_needs_reset(self):
        with pytest.raises(ad.ContractException, match="reset_state"):
            _baseline("lstm").step(np.ones((1, 1)))

    @pytest.mark.parametrize("kind", ["rnn", "gru", "lstm"])
    def test_bptt_gradients_match_finite_differences(self, kind):
        rng = np.random.default_rng(6)
        layer = snulab.units.RecurrentBaselineLayer.initialized(kind, rng, 3, 4)
        inputs = rng.normal(size=(5, 2, 3))

        def fn():
            layer.reset_state(2)
            total = None
            for t in range(5):
                h = layer.step(inputs[t])
                term = ad.tensor_sum(h * h)
                total = term if total is None else total + term
            return total

        tensors = [tensor for _, tensor in layer.parameters()]
        assert ad.gradcheck(fn, tensors) < 1e-6


def _spec(layers, input_shape=(88,), **init):
    return snulab.units.NetworkSpec.parse(dict(
        input_shape=list(input_shape), layers=layers, init=init))


class TestNetworkSpec(object):

    def test_parse_and_to_dict(self):
        raw = dict(
            input_shape=[88],
            layers=[dict(kind="snu", units=150), dict(kind="dense_sigmoid", units=88)],
            init=dict(weight_scheme="glorot_uniform", decay=0.8, bias=-1.0),
        )
        spec = snulab.units.NetworkSpec.parse(raw)

        assert spec.spiking
        assert spec.shapes() == [((88,), (150,)), ((150,), (88,))]
        assert snulab.units.NetworkSpec.parse(spec.to_dict()).to_dict() == spec.to_dict()

    def test_unknown_layer_key(self):
        with pytest.raises(snulab.units.NetworkSpecException, match="unknown keys: width"):
            _spec([dict(kind="snu", width=3)])

    def test_unknown_kind(self):
        with pytest.raises(snulab.units.NetworkSpecException, match="Layer 0"):
            _spec([dict(kind="transformer", units=3)])

    def test_hidden_non_spiking_layer_rejected(self):
        with pytest.raises(snulab.units.NetworkSpecException, match="Layer 0"):
            _spec([dict(kind="dense_sigmoid", units=10), dict(kind="snu", units=10)])

    def test_conv_needs_image_input(self):
        with pytest.raises(snulab.units.NetworkSpecException, match="conv_snu"):
            _spec([dict(kind="conv_snu", filters=2, kernel=3)])

    def test_maxpool_window_must_fit(self):
        with pytest.raises(snulab.units.NetworkSpecException, match="maxpool"):
            _spec([dict(kind="maxpool", window=5)], input_shape=(1, 4, 4))

    def test_invalid_units(self):
        with pytest.raises(snulab.units.NetworkSpecException, match="units"):
            _spec([dict(kind="snu", units=0)])

    def test_conv_pool_readout_network(self):
        spec = _spec([
            dict(kind="conv_snu", filters=3, kernel=3),
            dict(kind="maxpool", window=2),
            dict(kind="snu", units=10),
        ], input_shape=(1, 8, 8))
        network = spec.build(np.random.default_rng(0))
        network.reset_state(2)

        with ad.no_grad():
            out = network.step(np.ones((2, 8, 8)))

        assert out.shape == (2, 10)
        assert [name for name, _ in network.weight_parameters()] == \
            ["layers.0.weight", "layers.2.weight"]

    def test_empty_layers_parse_but_do_not_build(self):
        spec = _spec([], input_shape=(4,))

        assert spec.shapes() == []
        assert not spec.spiking
        with pytest.raises(snulab.units.NetworkSpecException, match="at least one layer"):
            spec.build(np.random.default_rng(0))

    def test_recurrent_baseline_network(self):
        spec = _spec([dict(kind="lstm", units=6), dict(kind="dense_sigmoid", units=88)])
        network = spec.build(np.random.default_rng(0))
        network.reset_state(3)

        with ad.no_grad():
            out = network.step(np.ones((3, 88)))

        assert out.shape == (3, 88)
        assert [name for name, _ in network.weight_parameters()] == ["layers.1.weight"]

    def test_build_is_seeded(self):
        spec = _spec([dict(kind="snu", units=5)], input_shape=(3,))
        first = spec.build(np.random.default_rng(7)).layers[0].weight.data
        second = spec.build(np.random.default_rng(7)).layers[0].weight.data
        np.testing.assert_array_equal(first, second)


class TestParamCount(object):

    def test_jsb_hidden_layer(self):
        spec = _spec([dict(kind="snu", units=150), dict(kind="dense_sigmoid", units=88)])

        counts = snulab.units.param_count(spec)

        assert counts[0] == ("0:snu", 13350)
        assert counts[1] == ("1:dense_sigmoid", 150 * 88 + 88)
        assert snulab.units.synapse_count(spec) == 26400

    def test_formula_matches_enumeration_for_random_specs(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            m, n = int(rng.integers(1, 40)), int(rng.integers(1, 40))
            mode = str(rng.choice(snulab.units.DECAY_MODES))
            spec = _spec([dict(kind="snu", units=n, decay_mode=mode)], input_shape=(m,))

            counted = snulab.units.enumerate_params(spec.build(rng))
            expected = (m + 1) * n if mode == snulab.units.DECAY_SHARED else (m + 2) * n

            assert counted == snulab.units.param_count(spec)
            assert counted[0][1] == expected

    def test_conv_counts(self):
        spec = _spec([dict(kind="conv_snu", filters=4, kernel=3), dict(kind="maxpool", window=2),
                      dict(kind="snu", units=2)], input_shape=(2, 4, 4))

        assert snulab.units.param_count(spec) == [
            ("0:conv_snu", 4 * 2 * 9 + 4), ("1:maxpool", 0), ("2:snu", 4 * 2 * 2 * 2 + 2)]
        assert snulab.units.enumerate_params(spec.build(np.random.default_rng(0))) == \
            snulab.units.param_count(spec)

    def test_empty_network(self):
        spec = _spec([], input_shape=(4,))

        assert snulab.units.param_count(spec) == []
        assert snulab.units.synapse_count(spec) == 0

    @pytest.mark.parametrize("kind", ["rnn", "gru", "lstm"])
    def test_recurrent_baselines_match_reference(self, kind):
        spec = _spec([dict(kind=kind, units=7), dict(kind="dense_sigmoid", units=2)],
                     input_shape=(5,))

        counts = snulab.units.param_count(spec)

        assert counts[0] == ("0:" + kind, snulab.units.reference_counts(5, 7)[kind])
        assert snulab.units.enumerate_params(spec.build(np.random.default_rng(1))) == counts
        assert snulab.units.synapse_count(spec) == 7 * 2

    def test_reference_counts(self):
        counts = snulab.units.reference_counts(88, 150)
        assert counts["snu"] == 13350
        assert counts["rnn"] == 150 * (88 + 150 + 1)
        assert counts["lstm"] == 4 * counts["rnn"]
        assert counts["gru"] == 3 * counts["rnn"]


class TestLif(object):

    def test_config_validation(self):
        with pytest.raises(snulab.units.LifConfigException, match="tau"):
            snulab.units.LifNeuronConfig(1.0, 1.0, 0.5, 1.0, np.ones((2, 2)))
        with pytest.raises(snulab.units.LifConfigException, match="v_th"):
            snulab.units.LifNeuronConfig(1.0, 1.0, 5.0, -1.0, np.ones((2, 2)))
        with pytest.raises(snulab.units.LifConfigException, match="per neuron"):
            snulab.units.LifNeuronConfig(1.0, 1.0, [5.0, 6.0, 7.0], 1.0, np.ones((2, 2)))

    def test_mapping(self):
        cfg = snulab.units.LifNeuronConfig(1e-3, 2.0, 5e-3, 0.7, np.full((3, 2), 4.0))
        layer = snulab.units.lif_to_snu(cfg)

        assert layer.decay_values == pytest.approx(0.8)
        np.testing.assert_allclose(layer.bias.data, [-0.7, -0.7])
        np.testing.assert_allclose(layer.weight.data, np.full((3, 2), 2e-3))

    def test_round_trip(self):
        cfg = snulab.units.LifNeuronConfig(1e-3, 2.0, 5e-3, 0.7, np.full((3, 2), 4.0))
        back = snulab.units.snu_to_lif(snulab.units.lif_to_snu(cfg), 1e-3, 2.0)

        assert back.tau == pytest.approx(5e-3)
        np.testing.assert_allclose(back.v_th, [0.7, 0.7])
        np.testing.assert_allclose(back.w_lif, cfg.w_lif)

    def test_round_trip_within_one_ulp(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            n = int(rng.integers(1, 6))
            layer = snulab.units.SnuLayer(
                rng.uniform(-2.0, 2.0, size=(3, n)),
                decay=rng.uniform(0.5, 0.99, size=n),
                bias=-rng.uniform(0.1, 3.0, size=n),
                decay_mode=snulab.units.DECAY_PER_UNIT,
            )
            delta_t, capacitance = rng.uniform(1e-4, 1e-2), rng.uniform(0.1, 10.0)

            back = snulab.units.lif_to_snu(snulab.units.snu_to_lif(layer, delta_t, capacitance))

            for a, b in ((layer.weight.data, back.weight.data),
                         (layer.decay.data, back.decay.data),
                         (layer.bias.data, back.bias.data)):
                assert np.all(np.abs(a - b) <= np.spacing(np.abs(a)))

    def test_oracle_reproduces_worked_snu_trace(self):
        cfg = snulab.units.LifNeuronConfig(1e-3, 1.0, 5e-3, 1.0, np.array([[500.0]]))

        run = snulab.units.lif_oracle_run(cfg, np.ones((4, 1, 1), dtype=np.uint8))

        assert run.spikes.data[:, 0, 0].tolist() == [0, 0, 1, 0]
        assert run.v_trace[:, 0, 0] == pytest.approx([0.5, 0.9, 1.22, 0.5])

    def test_oracle_zero_input(self):
        cfg = snulab.checks.random_lif_config(np.random.default_rng(2), neurons=10, inputs=4)

        run = snulab.units.lif_oracle_run(cfg, np.zeros((50, 2, 4), dtype=np.uint8))

        assert not run.spikes.data.any()
        assert not run.v_trace.any()

    def test_oracle_sub_threshold_fixed_point(self):
        # drive 0.2 per step against a 0.2 leak settles at 1.0, below v_th
        cfg = snulab.units.LifNeuronConfig(1e-3, 1.0, 5e-3, 1.5, np.array([[200.0]]))

        run = snulab.units.lif_oracle_run(cfg, np.ones((300, 1, 1), dtype=np.uint8))

        trace = run.v_trace[:, 0, 0]
        assert not run.spikes.data.any()
        assert np.all(np.diff(trace) >= 0.0)
        assert trace[-1] == pytest.approx(1.0, rel=1e-9)

    def test_unit_decay_needs_if_mode(self):
        layer = snulab.units.SnuLayer(np.ones((2, 2)), decay=1.0)

        with pytest.raises(snulab.units.LifConfigException, match="infinite"):
            snulab.units.snu_to_lif(layer, 1e-3, 1.0)
        assert np.isinf(snulab.units.snu_to_lif(layer, 1e-3, 1.0, allow_if_mode=True).tau)

    def test_zero_decay_has_no_lif_counterpart(self):
        layer = snulab.units.SnuLayer(np.ones((2, 2)), decay=0.0)
        with pytest.raises(snulab.units.LifConfigException):
            snulab.units.snu_to_lif(layer, 1e-3, 1.0)

    def test_oracle_matches_snu_exactly(self):
        rng = np.random.default_rng(5)
        cfg = snulab.units.LifNeuronConfig(
            1e-3, 1.0,
            rng.uniform(2e-3, 40e-3, size=10),
            rng.uniform(0.2, 2.0, size=10),
            rng.uniform(-200.0, 1000.0, size=(6, 10)),
        )
        spikes = (rng.random((500, 3, 6)) < 0.3).astype(np.uint8)

        run = snulab.units.lif_oracle_run(cfg, spikes)
        layer = snulab.units.lif_to_snu(cfg)
        layer.reset_state(3)
        with ad.no_grad():
            produced = np.stack([layer.step(spikes[t].astype(np.float64)).data
                                 for t in range(500)])

        assert run.spikes.data.sum() > 0
        np.testing.assert_array_equal(produced, run.spikes.data)
        np.testing.assert_array_equal(run.v_trace >= 0.0, True)

    def test_oracle_keeps_stream_segments(self):
        stream = snulab.data.SpikeStream(np.ones((4, 1, 2), dtype=np.uint8),
                                         [snulab.data.Segment(0, 4, [3])], 4, 0)
        cfg = snulab.units.LifNeuronConfig(1e-3, 1.0, 5e-3, 1.0, np.ones((2, 1)) * 1000.0)

        run = snulab.units.lif_oracle_run(cfg, stream)

        assert run.spikes.segments == stream.segments

    def test_oracle_rejects_non_binary_input(self):
        cfg = snulab.units.LifNeuronConfig(1e-3, 1.0, 5e-3, 1.0, np.ones((2, 1)))
        with pytest.raises(snulab.data.DatasetDomainException):
            snulab.units.lif_oracle_run(cfg, np.full((3, 1, 2), 0.5))
