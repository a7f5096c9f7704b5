import logging
import typing

import numpy as np

import snulab.autodiff as ad
import snulab.config
import snulab.units


logger = logging.getLogger(__name__)


class CheckResult(object):

    __slots__ = ("name", "passed", "lines")

    def __init__(self, name, passed, lines):
        self.name = name
        self.passed = passed
        self.lines = lines


def smooth_network(spec: snulab.units.NetworkSpec, rng: np.random.Generator):
    """Build ``spec`` with every spiking unit swapped to its sigmoid-output variant."""
    network = spec.build(rng)
    for layer in network.layers:
        if isinstance(layer, snulab.units.StatefulUnits):
            layer.output_fn = snulab.units.OUTPUT_SIGMOID
    return network


def _unrolled_loss(network, inputs: np.ndarray, targets: np.ndarray) -> ad.Tensor:
    network.reset_state(inputs.shape[1])
    total = None
    for t in range(inputs.shape[0]):
        output = network.step(inputs[t])
        if network.output_kind == snulab.units.KIND_DENSE_SOFTMAX:
            term = ad.loss(ad.OP_SOFTMAX_XENT, output, targets[t])
        else:
            term = ad.loss(ad.OP_BERNOULLI_NLL, output, targets[t])
        total = term if total is None else total + term
    return total


def gradcheck(config: snulab.config.RunConfigFile, seed: int = 0) -> CheckResult:
    check = config.check
    rng = np.random.default_rng([seed, 1])
    network = smooth_network(config.network, rng)
    features = tuple(config.network.input_shape)
    classes = int(np.prod(config.network.shapes()[-1][1]))

    inputs = rng.random((check.grad_steps, check.grad_batch) + features)
    if network.output_kind == snulab.units.KIND_DENSE_SOFTMAX:
        labels = rng.integers(0, classes, size=(check.grad_steps, check.grad_batch))
        targets = np.eye(classes)[labels]
    else:
        targets = (rng.random((check.grad_steps, check.grad_batch, classes)) < 0.5) * 1.0

    params = network.named_parameters()
    error = ad.gradcheck(
        lambda: _unrolled_loss(network, inputs, targets),
        [tensor for _, tensor in params],
        samples=check.grad_samples,
        rng=rng,
    )
    passed = error <= check.grad_tolerance
    lines = [
        "gradcheck: {} tensors, {} steps, batch {}".format(
            len(params), check.grad_steps, check.grad_batch),
        "max relative error {:.3e} (tolerance {:.1e})".format(error, check.grad_tolerance),
    ]
    return CheckResult("gradcheck", passed, lines)


def random_lif_config(rng: np.random.Generator, neurons: int, inputs: int,
                      delta_t: float = 1e-3) -> snulab.units.LifNeuronConfig:
    capacitance = float(rng.uniform(0.5, 2.0))
    tau = rng.uniform(2.0 * delta_t, 50.0 * delta_t, size=neurons)
    # a few integrate-and-fire neurons
    tau[rng.random(neurons) < 0.1] = np.inf
    v_th = rng.uniform(0.2, 2.0, size=neurons)
    w_lif = rng.uniform(-0.2, 1.0, size=(inputs, neurons)) * capacitance / delta_t
    return snulab.units.LifNeuronConfig(delta_t, capacitance, tau, v_th, w_lif)


def first_divergence(cfg: snulab.units.LifNeuronConfig,
                     spikes: np.ndarray) -> typing.Tuple[int, int]:
    """(first mismatching step or -1, mismatch count) between the SNU and the LIF oracle."""
    oracle = snulab.units.lif_oracle_run(cfg, spikes).spikes.data
    layer = snulab.units.lif_to_snu(cfg)
    layer.reset_state(spikes.shape[1])
    mismatches = np.zeros(spikes.shape[0], dtype=np.int64)
    with ad.no_grad():
        for t in range(spikes.shape[0]):
            output = layer.step(spikes[t].astype(np.float64)).data
            mismatches[t] = int(np.sum(output != oracle[t]))
    bad = np.flatnonzero(mismatches)
    return (int(bad[0]) if bad.size else -1), int(mismatches.sum())


def lifcheck(check: snulab.config.CheckConfig, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 2])
    cfg = random_lif_config(rng, check.lif_neurons, check.lif_inputs)
    rates = rng.uniform(0.05, 0.5, size=check.lif_inputs)
    spikes = (rng.random((check.lif_steps, 1, check.lif_inputs)) < rates).astype(np.uint8)

    step, count = first_divergence(cfg, spikes)
    lines = ["lifcheck: {} neurons, {} steps, {} inputs".format(
        check.lif_neurons, check.lif_steps, check.lif_inputs)]
    if step < 0:
        lines.append("0 spike mismatches")
    else:
        lines.append("{} spike mismatches, first divergence at step {}".format(count, step))
    return CheckResult("lifcheck", step < 0, lines)


def paramcount(spec: snulab.units.NetworkSpec) -> CheckResult:
    closed = snulab.units.param_count(spec)
    counted = snulab.units.enumerate_params(spec.build(np.random.default_rng(0))) \
        if spec.layers else []
    lines = ["{:<20} {:>10} {:>10}".format("layer", "formula", "enumerated")]
    passed = True
    shapes = spec.shapes()
    for idx, ((name, formula), (_, enumerated)) in enumerate(zip(closed, counted)):
        passed = passed and formula == enumerated
        lines.append("{:<20} {:>10} {:>10}".format(name, formula, enumerated))
        layer = spec.layers[idx]
        if layer.kind in (snulab.units.KIND_SNU, snulab.units.KIND_SSNU):
            m = int(np.prod(shapes[idx][0]))
            reference = snulab.units.reference_counts(m, layer.units)
            lines.append("    same width as rnn {rnn}, gru {gru}, lstm {lstm}".format(**reference))

    synapses = snulab.units.synapse_count(spec)
    lines.append("total parameters {}".format(sum(count for _, count in counted)))
    lines.append("synaptic weights {} -> {} PCM devices".format(synapses, 2 * synapses))
    return CheckResult("paramcount", passed, lines)
