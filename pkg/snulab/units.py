"""Spiking Neural Units and the networks built from them.

A layer of SNUs updates

    s_t = g(W x_t + decay * s_{t-1} * (1 - y_{t-1}))
    y_t = h(s_t + b)

with g in {relu, identity} and h the surrogate step (SNU) or a sigmoid (sSNU).
The same update run with LIF parameters is available as a plain numpy oracle.
"""
import logging
import math
import typing

import numpy as np

import snulab.autodiff as ad
import snulab.data


logger = logging.getLogger(__name__)


KIND_SNU = "snu"
KIND_SSNU = "ssnu"
KIND_CONV_SNU = "conv_snu"
KIND_MAXPOOL = "maxpool"
KIND_DENSE_SIGMOID = "dense_sigmoid"
KIND_DENSE_SOFTMAX = "dense_softmax"
KIND_RNN = "rnn"
KIND_GRU = "gru"
KIND_LSTM = "lstm"
LAYER_KINDS = (KIND_SNU, KIND_SSNU, KIND_CONV_SNU, KIND_MAXPOOL,
               KIND_DENSE_SIGMOID, KIND_DENSE_SOFTMAX, KIND_RNN, KIND_GRU, KIND_LSTM)
SPIKING_KINDS = (KIND_SNU, KIND_CONV_SNU)
RECURRENT_GATES = dict(rnn=("h",), gru=("z", "r", "h"), lstm=("i", "f", "o", "g"))

INPUT_FNS = (ad.OP_RELU, ad.OP_IDENTITY)
OUTPUT_STEP = ad.OP_STEP
OUTPUT_SIGMOID = ad.OP_SIGMOID

DECAY_SHARED = "shared"
DECAY_PER_UNIT = "per_unit"
DECAY_MODES = (DECAY_SHARED, DECAY_PER_UNIT)

DEFAULT_DECAY = 0.8
DEFAULT_BIAS = -1.0
WEIGHT_SCHEMES = ("glorot_uniform",)


class LifConfigException(Exception):

    def __init__(self, message):
        super().__init__(message)


class NetworkSpecException(Exception):

    def __init__(self, message):
        super().__init__(message)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _output(kind: str, a: ad.Tensor) -> ad.Tensor:
    if kind == OUTPUT_STEP:
        return ad.step_surrogate(a)
    return ad.activation(kind, a)


class StatefulUnits(object):
    """State handling shared by dense and convolutional SNU layers."""

    def __init__(self, decay, decay_mode, bias, input_fn, output_fn):
        if input_fn not in INPUT_FNS:
            raise NetworkSpecException("Unknown input function {}".format(input_fn))
        if output_fn not in (OUTPUT_STEP, OUTPUT_SIGMOID):
            raise NetworkSpecException("Unknown output function {}".format(output_fn))
        if decay_mode not in DECAY_MODES:
            raise NetworkSpecException("Unknown decay mode {}".format(decay_mode))

        if decay_mode == DECAY_PER_UNIT:
            self.decay = ad.parameter(decay)
        else:
            self.decay = float(decay)
        if not np.all((np.asarray(self.decay_values) >= 0) & (np.asarray(self.decay_values) <= 1)):
            raise NetworkSpecException("Decay values must lie in [0, 1]")

        self.decay_mode = decay_mode
        self.bias = bias
        self.input_fn = input_fn
        self.output_fn = output_fn
        self.state: typing.Optional[ad.Tensor] = None
        self.last_output: typing.Optional[ad.Tensor] = None

    @property
    def decay_values(self):
        if isinstance(self.decay, ad.Tensor):
            return self.decay.data
        return self.decay

    def _state_shape(self, batch: int) -> typing.Tuple[int, ...]:
        raise NotImplementedError

    def reset_state(self, batch: int):
        shape = self._state_shape(batch)
        self.state = ad.Tensor(np.zeros(shape))
        self.last_output = ad.Tensor(np.zeros(shape))

    def detach_state(self):
        if self.state is not None:
            self.state = self.state.detach()
            self.last_output = self.last_output.detach()

    def _update(self, drive: ad.Tensor) -> ad.Tensor:
        if self.state is None:
            raise ad.ContractException("Layer state is not initialized; call reset_state first")
        if self.state.shape != drive.shape:
            raise ad.DimensionException("State {} does not match input drive {}".format(
                self.state.shape, drive.shape))

        carry = (self.decay * self.state) * (1.0 - self.last_output)
        state = ad.activation(self.input_fn, drive + carry)
        pre = state + self.bias if self.bias is not None else state
        output = _output(self.output_fn, pre)

        self.state = state
        self.last_output = output
        return output

    def constrain(self):
        if isinstance(self.decay, ad.Tensor):
            np.clip(self.decay.data, 0.0, 1.0, out=self.decay.data)


class SnuLayer(StatefulUnits):

    def __init__(self, weight, decay=DEFAULT_DECAY, bias=DEFAULT_BIAS,
                 input_fn=ad.OP_RELU, output_fn=OUTPUT_STEP, decay_mode=DECAY_SHARED,
                 trainable_bias=True):
        self.weight = ad.parameter(weight)
        if self.weight.data.ndim != 2:
            raise NetworkSpecException("SNU weights must be a matrix, got {}".format(
                self.weight.shape))
        if decay_mode == DECAY_PER_UNIT:
            decay = np.broadcast_to(np.asarray(decay, dtype=np.float64), (self.units,))
        if bias is not None:
            bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), (self.units,))
            bias = ad.parameter(bias) if trainable_bias else ad.Tensor(np.array(bias))
        super().__init__(decay, decay_mode, bias, input_fn, output_fn)

    @property
    def inputs(self) -> int:
        return self.weight.shape[0]

    @property
    def units(self) -> int:
        return self.weight.shape[1]

    def _state_shape(self, batch: int) -> typing.Tuple[int, ...]:
        return (batch, self.units)

    def step(self, x_t) -> ad.Tensor:
        x_t = ad.as_tensor(x_t)
        if x_t.data.ndim != 2 or x_t.shape[1] != self.inputs:
            raise ad.DimensionException("Input {} does not match {} SNU inputs".format(
                x_t.shape, self.inputs))
        return self._update(ad.matmul(x_t, self.weight))

    def parameters(self) -> typing.List[typing.Tuple[str, ad.Tensor]]:
        params = [("weight", self.weight)]
        if self.bias is not None and self.bias.requires_grad:
            params.append(("bias", self.bias))
        if isinstance(self.decay, ad.Tensor):
            params.append(("decay", self.decay))
        return params


class ConvSnuLayer(StatefulUnits):

    def __init__(self, kernel, input_shape, stride=1, padding="same", decay=DEFAULT_DECAY,
                 bias=DEFAULT_BIAS, input_fn=ad.OP_RELU, output_fn=OUTPUT_STEP,
                 decay_mode=DECAY_SHARED, trainable_bias=True):
        self.kernel = ad.parameter(kernel)
        if self.kernel.data.ndim != 4 or self.kernel.shape[1] != input_shape[0]:
            raise NetworkSpecException("Kernel {} does not fit input {}".format(
                self.kernel.shape, tuple(input_shape)))
        self.stride = stride
        self.padding = padding
        self.input_shape = tuple(input_shape)
        try:
            out_hw = ad.conv_output_shape(
                self.input_shape[1:], self.kernel.shape[2:], stride, padding)
        except (ad.DimensionException, ad.ContractException) as e:
            raise NetworkSpecException(str(e))
        self.output_shape = (self.filters,) + out_hw

        per_map = (self.filters, 1, 1)
        if decay_mode == DECAY_PER_UNIT:
            decay = np.broadcast_to(np.asarray(decay, dtype=np.float64), per_map)
        if bias is not None:
            bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), per_map)
            bias = ad.parameter(bias) if trainable_bias else ad.Tensor(np.array(bias))
        super().__init__(decay, decay_mode, bias, input_fn, output_fn)

    @property
    def filters(self) -> int:
        return self.kernel.shape[0]

    def _state_shape(self, batch: int) -> typing.Tuple[int, ...]:
        return (batch,) + self.output_shape

    def step(self, x_t) -> ad.Tensor:
        x_t = ad.as_tensor(x_t)
        if x_t.shape[1:] != self.input_shape:
            raise ad.DimensionException("Input {} does not match conv input {}".format(
                x_t.shape, self.input_shape))
        return self._update(ad.conv2d(x_t, self.kernel, self.stride, self.padding))

    def parameters(self) -> typing.List[typing.Tuple[str, ad.Tensor]]:
        params = [("weight", self.kernel)]
        if self.bias is not None and self.bias.requires_grad:
            params.append(("bias", self.bias))
        if isinstance(self.decay, ad.Tensor):
            params.append(("decay", self.decay))
        return params


class DenseLayer(object):

    def __init__(self, weight, bias=None, output_fn=OUTPUT_SIGMOID):
        self.weight = ad.parameter(weight)
        self.bias = ad.parameter(bias) if bias is not None else None
        self.output_fn = output_fn

    @property
    def inputs(self) -> int:
        return self.weight.shape[0]

    @property
    def units(self) -> int:
        return self.weight.shape[1]

    def reset_state(self, batch: int):
        pass

    def detach_state(self):
        pass

    def constrain(self):
        pass

    def step(self, x_t) -> ad.Tensor:
        x_t = ad.as_tensor(x_t)
        if x_t.data.ndim != 2 or x_t.shape[1] != self.inputs:
            raise ad.DimensionException("Input {} does not match {} dense inputs".format(
                x_t.shape, self.inputs))
        a = ad.matmul(x_t, self.weight)
        if self.bias is not None:
            a = a + self.bias
        if self.output_fn == OUTPUT_SIGMOID:
            return ad.activation(ad.OP_SIGMOID, a)
        return a

    def parameters(self) -> typing.List[typing.Tuple[str, ad.Tensor]]:
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params


class MaxPoolLayer(object):

    def __init__(self, window: int):
        self.window = window

    def reset_state(self, batch: int):
        pass

    def detach_state(self):
        pass

    def constrain(self):
        pass

    def step(self, x_t) -> ad.Tensor:
        return ad.maxpool2d(x_t, self.window)

    def parameters(self) -> typing.List[typing.Tuple[str, ad.Tensor]]:
        return []


class RecurrentBaselineLayer(object):
    """Non-spiking recurrent ANN layers (Elman RNN, GRU, LSTM) for comparison runs.

    Each gate has its own input matrix, recurrent matrix and bias, so a layer
    of n units on m inputs holds gates * n * (m + n + 1) parameters. The gate
    matrices stay in software on every backend.
    """

    def __init__(self, kind, weights, recurrent, biases):
        if kind not in RECURRENT_GATES:
            raise NetworkSpecException("Unknown recurrent layer kind {}".format(kind))
        gates = RECURRENT_GATES[kind]
        if set(weights) != set(gates) or set(recurrent) != set(gates) or \
                set(biases) != set(gates):
            raise NetworkSpecException("A {} layer needs gates {}".format(kind, ", ".join(gates)))
        self.kind = kind
        self.gates = gates
        self.weights = {gate: ad.parameter(weights[gate]) for gate in gates}
        self.recurrent = {gate: ad.parameter(recurrent[gate]) for gate in gates}
        self.biases = {gate: ad.parameter(biases[gate]) for gate in gates}
        for gate in gates:
            m, n = self.weights[gate].shape
            if self.recurrent[gate].shape != (n, n) or self.biases[gate].shape != (n,) or \
                    (m, n) != self.weights[gates[0]].shape:
                raise NetworkSpecException("Gate {} of the {} layer has inconsistent shapes".format(
                    gate, kind))
        self.hidden: typing.Optional[ad.Tensor] = None
        self.cell: typing.Optional[ad.Tensor] = None

    @classmethod
    def initialized(cls, kind: str, rng: np.random.Generator, inputs: int, units: int):
        gates = RECURRENT_GATES[kind]
        weights, recurrent, biases = dict(), dict(), dict()
        for gate in gates:
            weights[gate] = glorot_uniform(rng, (inputs, units), inputs, units)
            recurrent[gate] = glorot_uniform(rng, (units, units), units, units)
            biases[gate] = np.zeros(units)
        return cls(kind, weights, recurrent, biases)

    @property
    def inputs(self) -> int:
        return self.weights[self.gates[0]].shape[0]

    @property
    def units(self) -> int:
        return self.weights[self.gates[0]].shape[1]

    def reset_state(self, batch: int):
        self.hidden = ad.Tensor(np.zeros((batch, self.units)))
        self.cell = ad.Tensor(np.zeros((batch, self.units)))

    def detach_state(self):
        if self.hidden is not None:
            self.hidden = self.hidden.detach()
            self.cell = self.cell.detach()

    def constrain(self):
        pass

    def _gate(self, gate: str, fn: str, x_t: ad.Tensor, h: ad.Tensor) -> ad.Tensor:
        a = ad.matmul(x_t, self.weights[gate]) + ad.matmul(h, self.recurrent[gate]) \
            + self.biases[gate]
        return ad.activation(fn, a)

    def step(self, x_t) -> ad.Tensor:
        if self.hidden is None:
            raise ad.ContractException("Layer state is not initialized; call reset_state first")
        x_t = ad.as_tensor(x_t)
        if x_t.data.ndim != 2 or x_t.shape[1] != self.inputs:
            raise ad.DimensionException("Input {} does not match {} {} inputs".format(
                x_t.shape, self.inputs, self.kind))
        if x_t.shape[0] != self.hidden.shape[0]:
            raise ad.DimensionException("Input batch {} does not match state batch {}".format(
                x_t.shape[0], self.hidden.shape[0]))

        h = self.hidden
        if self.kind == KIND_RNN:
            h = self._gate("h", ad.OP_TANH, x_t, h)
        elif self.kind == KIND_GRU:
            z = self._gate("z", ad.OP_SIGMOID, x_t, h)
            r = self._gate("r", ad.OP_SIGMOID, x_t, h)
            candidate = self._gate("h", ad.OP_TANH, x_t, r * h)
            h = (1.0 - z) * h + z * candidate
        else:
            i = self._gate("i", ad.OP_SIGMOID, x_t, h)
            f = self._gate("f", ad.OP_SIGMOID, x_t, h)
            o = self._gate("o", ad.OP_SIGMOID, x_t, h)
            g = self._gate("g", ad.OP_TANH, x_t, h)
            self.cell = f * self.cell + i * g
            h = o * ad.activation(ad.OP_TANH, self.cell)
        self.hidden = h
        return h

    def parameters(self) -> typing.List[typing.Tuple[str, ad.Tensor]]:
        params = []
        for gate in self.gates:
            params.append(("weight_{}".format(gate), self.weights[gate]))
            params.append(("recurrent_{}".format(gate), self.recurrent[gate]))
            params.append(("bias_{}".format(gate), self.biases[gate]))
        return params


def snu_step(layer: SnuLayer, x_t) -> ad.Tensor:
    return layer.step(x_t)


def ssnu_step(layer: SnuLayer, x_t) -> ad.Tensor:
    if layer.output_fn != OUTPUT_SIGMOID:
        raise ad.ContractException("ssnu_step needs a layer with a sigmoid output")
    return layer.step(x_t)


def conv_snu_step(layer: ConvSnuLayer, x_t) -> ad.Tensor:
    return layer.step(x_t)


class LayerSpec(object):

    __slots__ = ("kind", "units", "filters", "kernel", "stride", "padding", "window",
                 "decay_mode", "decay", "input_fn", "bias", "bias_init")

    FIELDS = dict(
        snu=("units", "decay_mode", "decay", "input_fn", "bias", "bias_init"),
        ssnu=("units", "decay_mode", "decay", "input_fn", "bias", "bias_init"),
        conv_snu=("filters", "kernel", "stride", "padding", "decay_mode", "decay", "input_fn",
                  "bias", "bias_init"),
        maxpool=("window",),
        dense_sigmoid=("units", "bias"),
        dense_softmax=("units", "bias"),
        rnn=("units",),
        gru=("units",),
        lstm=("units",),
    )

    def __init__(self, kind, units=None, filters=None, kernel=None, stride=1, padding="same",
                 window=None, decay_mode=DECAY_SHARED, decay=None, input_fn=ad.OP_RELU,
                 bias=True, bias_init=None):
        self.kind = kind
        self.units = units
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.window = window
        self.decay_mode = decay_mode
        self.decay = decay
        self.input_fn = input_fn
        self.bias = bias
        self.bias_init = bias_init

    @classmethod
    def parse(cls, raw: dict, index: int):
        if not isinstance(raw, dict) or raw.get("kind") not in LAYER_KINDS:
            raise NetworkSpecException("Layer {} has no valid kind".format(index))
        kind = raw["kind"]
        allowed = set(cls.FIELDS[kind]) | {"kind"}
        unknown = sorted(set(raw.keys()) - allowed)
        if unknown:
            raise NetworkSpecException("Layer {} ({}) has unknown keys: {}".format(
                index, kind, ", ".join(unknown)))

        spec = cls(**raw)
        for name in ("units", "filters", "kernel", "window"):
            if name in cls.FIELDS[kind]:
                value = getattr(spec, name)
                if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                    raise NetworkSpecException("Layer {} ({}) needs a positive integer {}".format(
                        index, kind, name))
        if not isinstance(spec.stride, int) or spec.stride < 1:
            raise NetworkSpecException("Layer {} stride must be a positive integer".format(index))
        if spec.padding not in ("same", "valid"):
            raise NetworkSpecException("Layer {} padding must be same or valid".format(index))
        if spec.decay_mode not in DECAY_MODES:
            raise NetworkSpecException("Layer {} decay_mode must be one of {}".format(
                index, ", ".join(DECAY_MODES)))
        if spec.input_fn not in INPUT_FNS:
            raise NetworkSpecException("Layer {} input_fn must be one of {}".format(
                index, ", ".join(INPUT_FNS)))
        if not isinstance(spec.bias, bool):
            raise NetworkSpecException("Layer {} bias must be true or false".format(index))
        if spec.decay is not None and (not isinstance(spec.decay, (int, float))
                                       or not 0.0 <= spec.decay <= 1.0):
            raise NetworkSpecException("Layer {} decay must lie in [0, 1]".format(index))
        if spec.bias_init is not None and not isinstance(spec.bias_init, (int, float)):
            raise NetworkSpecException("Layer {} bias_init must be a number".format(index))
        return spec

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in ("kind",) + self.FIELDS[self.kind]}


class NetworkSpec(object):

    __slots__ = ("input_shape", "layers", "weight_scheme", "decay", "bias")
    input_shape: typing.Tuple[int, ...]
    layers: typing.List[LayerSpec]

    def __init__(self, input_shape, layers, weight_scheme="glorot_uniform",
                 decay=DEFAULT_DECAY, bias=DEFAULT_BIAS):
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        self.weight_scheme = weight_scheme
        self.decay = decay
        self.bias = bias
        self.validate()

    @classmethod
    def parse(cls, raw: dict):
        if not isinstance(raw, dict):
            raise NetworkSpecException("Network section must be an object")
        unknown = sorted(set(raw.keys()) - {"input_shape", "layers", "init"})
        if unknown:
            raise NetworkSpecException("Network has unknown keys: {}".format(", ".join(unknown)))

        init = raw.get("init", dict())
        unknown = sorted(set(init.keys()) - {"weight_scheme", "decay", "bias"})
        if unknown:
            raise NetworkSpecException("Network init has unknown keys: {}".format(
                ", ".join(unknown)))

        input_shape = raw.get("input_shape")
        if not isinstance(input_shape, list) or not input_shape or \
                not all(isinstance(e, int) and e > 0 for e in input_shape):
            raise NetworkSpecException("input_shape must be a list of positive integers")
        layers = raw.get("layers", [])
        if not isinstance(layers, list):
            raise NetworkSpecException("layers must be a list")

        return cls(
            input_shape,
            [LayerSpec.parse(layer, idx) for idx, layer in enumerate(layers)],
            weight_scheme=init.get("weight_scheme", "glorot_uniform"),
            decay=init.get("decay", DEFAULT_DECAY),
            bias=init.get("bias", DEFAULT_BIAS),
        )

    def to_dict(self) -> dict:
        return dict(
            input_shape=list(self.input_shape),
            layers=[layer.to_dict() for layer in self.layers],
            init=dict(weight_scheme=self.weight_scheme, decay=self.decay, bias=self.bias),
        )

    @property
    def spiking(self) -> bool:
        return any(layer.kind in SPIKING_KINDS for layer in self.layers)

    def shapes(self) -> typing.List[typing.Tuple[typing.Tuple[int, ...], typing.Tuple[int, ...]]]:
        """(input shape, output shape) per layer, without the batch extent."""
        shapes = []
        current = self.input_shape
        for idx, layer in enumerate(self.layers):
            if layer.kind == KIND_CONV_SNU:
                if len(current) != 3:
                    raise NetworkSpecException(
                        "Layer {} (conv_snu) needs a [c, h, w] input, got {}".format(
                            idx, list(current)))
                try:
                    out_hw = ad.conv_output_shape(
                        current[1:], (layer.kernel, layer.kernel), layer.stride, layer.padding)
                except (ad.DimensionException, ad.ContractException) as e:
                    raise NetworkSpecException("Layer {}: {}".format(idx, e))
                output = (layer.filters,) + out_hw
            elif layer.kind == KIND_MAXPOOL:
                if len(current) != 3 or layer.window > min(current[1:]):
                    raise NetworkSpecException(
                        "Layer {} (maxpool) window {} does not fit input {}".format(
                            idx, layer.window, list(current)))
                output = (current[0], current[1] // layer.window, current[2] // layer.window)
            else:
                output = (layer.units,)
            shapes.append((current, output))
            current = output
        return shapes

    def validate(self):
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise NetworkSpecException("Unknown weight scheme {}".format(self.weight_scheme))
        if not isinstance(self.bias, (int, float)):
            raise NetworkSpecException("Initial bias must be a number")
        if not isinstance(self.decay, (int, float)) or not 0.0 <= self.decay <= 1.0:
            raise NetworkSpecException("Initial decay must lie in [0, 1]")
        self.shapes()
        if self.spiking:
            for idx, layer in enumerate(self.layers[:-1]):
                if layer.kind not in SPIKING_KINDS + (KIND_MAXPOOL,):
                    raise NetworkSpecException(
                        "Layer {} ({}) is non-spiking but not the output layer".format(
                            idx, layer.kind))

    def build(self, rng: np.random.Generator) -> "Network":
        if not self.layers:
            raise NetworkSpecException("A network needs at least one layer")
        layers = []
        for idx, ((in_shape, out_shape), layer) in enumerate(zip(self.shapes(), self.layers)):
            decay = layer.decay if layer.decay is not None else self.decay
            bias_value = layer.bias_init if layer.bias_init is not None else self.bias
            if layer.kind in (KIND_SNU, KIND_SSNU):
                m, n = int(np.prod(in_shape)), layer.units
                layers.append(SnuLayer(
                    glorot_uniform(rng, (m, n), m, n),
                    decay=decay,
                    bias=bias_value if layer.bias else None,
                    input_fn=layer.input_fn,
                    output_fn=OUTPUT_STEP if layer.kind == KIND_SNU else OUTPUT_SIGMOID,
                    decay_mode=layer.decay_mode,
                ))
            elif layer.kind == KIND_CONV_SNU:
                c, k, f = in_shape[0], layer.kernel, layer.filters
                layers.append(ConvSnuLayer(
                    glorot_uniform(rng, (f, c, k, k), c * k * k, f * k * k),
                    in_shape,
                    stride=layer.stride,
                    padding=layer.padding,
                    decay=decay,
                    bias=bias_value if layer.bias else None,
                    input_fn=layer.input_fn,
                    decay_mode=layer.decay_mode,
                ))
            elif layer.kind == KIND_MAXPOOL:
                layers.append(MaxPoolLayer(layer.window))
            elif layer.kind in RECURRENT_GATES:
                layers.append(RecurrentBaselineLayer.initialized(
                    layer.kind, rng, int(np.prod(in_shape)), layer.units))
            else:
                m, n = int(np.prod(in_shape)), layer.units
                layers.append(DenseLayer(
                    glorot_uniform(rng, (m, n), m, n),
                    bias=np.zeros(n) if layer.bias else None,
                    output_fn=OUTPUT_SIGMOID if layer.kind == KIND_DENSE_SIGMOID else "logits",
                ))
            logger.debug("Built layer {} ({}) {} -> {}".format(
                idx, layer.kind, list(in_shape), list(out_shape)))
        return Network(self, layers)


class Network(object):
    """Feed-forward stack of layers; recurrence lives only inside each unit's state."""

    def __init__(self, spec: NetworkSpec, layers):
        self.spec = spec
        self.layers = layers
        self._shapes = spec.shapes()

    @property
    def output_kind(self) -> str:
        return self.spec.layers[-1].kind

    def reset_state(self, batch: int):
        for layer in self.layers:
            layer.reset_state(batch)

    def detach_state(self):
        for layer in self.layers:
            layer.detach_state()

    def constrain(self):
        for layer in self.layers:
            layer.constrain()

    def step(self, x_t) -> ad.Tensor:
        x = ad.as_tensor(x_t)
        batch = x.shape[0]
        for layer, (in_shape, _) in zip(self.layers, self._shapes):
            if isinstance(layer, (ConvSnuLayer, MaxPoolLayer)):
                target = (batch,) + tuple(in_shape)
            else:
                target = (batch, int(np.prod(in_shape)))
            if x.shape != target:
                x = ad.reshape(x, target)
            x = layer.step(x)
        return x

    def named_parameters(self) -> typing.List[typing.Tuple[str, ad.Tensor]]:
        return [("layers.{}.{}".format(idx, name), tensor)
                for idx, layer in enumerate(self.layers)
                for name, tensor in layer.parameters()]

    def parameters(self) -> typing.List[ad.Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def weight_parameters(self) -> typing.List[typing.Tuple[str, ad.Tensor]]:
        return [(name, tensor) for name, tensor in self.named_parameters()
                if name.endswith(".weight")]

    def zero_grad(self):
        ad.zero_grad(self.parameters())


class LifNeuronConfig(object):
    """Discrete-time LIF neurons sharing one input weight matrix.

    ``tau`` and ``v_th`` are scalars or per-neuron arrays; ``tau = inf`` is the
    integrate-and-fire limit.
    """

    __slots__ = ("delta_t", "capacitance", "tau", "v_th", "w_lif")

    def __init__(self, delta_t, capacitance, tau, v_th, w_lif):
        self.delta_t = float(delta_t)
        self.capacitance = float(capacitance)
        self.tau = np.asarray(tau, dtype=np.float64)
        self.v_th = np.asarray(v_th, dtype=np.float64)
        self.w_lif = np.asarray(w_lif, dtype=np.float64)
        self.validate()

    def validate(self):
        if self.w_lif.ndim != 2:
            raise LifConfigException("w_lif must be a matrix, got {}".format(self.w_lif.shape))
        if not self.delta_t > 0:
            raise LifConfigException("delta_t must be positive, got {}".format(self.delta_t))
        if not self.capacitance > 0:
            raise LifConfigException("capacitance must be positive")
        if not np.all(self.tau > self.delta_t):
            raise LifConfigException("Every tau must exceed delta_t = {}".format(self.delta_t))
        if not np.all(self.v_th > 0):
            raise LifConfigException("v_th must be positive")
        for name in ("tau", "v_th"):
            value = getattr(self, name)
            if value.ndim > 1 or (value.ndim == 1 and value.shape[0] != self.neurons):
                raise LifConfigException("{} must be a scalar or one value per neuron".format(
                    name))

    @property
    def neurons(self) -> int:
        return self.w_lif.shape[1]

    @property
    def decay(self):
        return 1.0 - self.delta_t / self.tau

    @property
    def input_scale(self) -> float:
        return self.delta_t / self.capacitance

    @property
    def synaptic_weight(self) -> np.ndarray:
        return self.input_scale * self.w_lif


class LifRun(object):

    __slots__ = ("spikes", "v_trace")

    def __init__(self, spikes, v_trace):
        self.spikes = spikes
        self.v_trace = v_trace


def lif_oracle_run(cfg: LifNeuronConfig, spikes) -> LifRun:
    """Reference LIF simulation with reset, clamped at the resting potential 0.

    The operation order mirrors SnuLayer.step so both produce identical spikes.
    """
    cfg.validate()
    stream = spikes if isinstance(spikes, snulab.data.SpikeStream) else None
    data = spikes.data if stream is not None else np.asarray(spikes)
    if data.ndim != 3 or data.shape[2] != cfg.w_lif.shape[0]:
        raise ad.DimensionException("Input stream {} does not match {} LIF inputs".format(
            data.shape, cfg.w_lif.shape[0]))
    if not np.all((data == 0) | (data == 1)):
        raise snulab.data.DatasetDomainException("LIF oracle input must be binary")

    steps, batch = data.shape[0], data.shape[1]
    weight = cfg.synaptic_weight
    decay = cfg.decay
    if decay.ndim == 0:
        decay = float(decay)
    v = np.zeros((batch, cfg.neurons))
    y = np.zeros((batch, cfg.neurons))
    out = np.zeros((steps, batch, cfg.neurons), dtype=np.uint8)
    trace = np.zeros((steps, batch, cfg.neurons))

    for t in range(steps):
        drive = data[t].astype(np.float64) @ weight
        carry = (decay * v) * (1.0 - y)
        v = np.maximum(drive + carry, 0.0)
        y = (v > cfg.v_th).astype(np.float64)
        out[t] = y
        trace[t] = v

    segments = stream.segments if stream is not None else []
    n_s = stream.n_s if stream is not None else steps
    n_p = stream.n_p if stream is not None else 0
    return LifRun(snulab.data.SpikeStream(out, segments, n_s, n_p), trace)


def lif_to_snu(cfg: LifNeuronConfig) -> SnuLayer:
    cfg.validate()
    decay = cfg.decay
    per_unit = np.ndim(decay) > 0 or np.ndim(cfg.v_th) > 0
    return SnuLayer(
        cfg.synaptic_weight,
        decay=decay,
        bias=-cfg.v_th,
        input_fn=ad.OP_RELU,
        output_fn=OUTPUT_STEP,
        decay_mode=DECAY_PER_UNIT if per_unit else DECAY_SHARED,
    )


def snu_to_lif(layer: SnuLayer, delta_t: float, capacitance: float,
               allow_if_mode: bool = False) -> LifNeuronConfig:
    decay = np.asarray(layer.decay_values, dtype=np.float64)
    if np.any(decay >= 1.0) and not allow_if_mode:
        raise LifConfigException("Decay 1 means tau is infinite; pass allow_if_mode for IF neurons")
    if np.any(decay <= 0.0):
        raise LifConfigException("Decay 0 means tau equals delta_t, which LIF neurons exclude")
    if layer.bias is None:
        raise LifConfigException("An SNU without bias has no firing threshold")

    with np.errstate(divide="ignore"):
        tau = np.where(decay >= 1.0, np.inf, delta_t / (1.0 - decay))
    v_th = -layer.bias.data
    if layer.decay_mode == DECAY_SHARED:
        tau = float(tau)
    scale = delta_t / capacitance
    return LifNeuronConfig(delta_t, capacitance, tau, v_th, layer.weight.data / scale)


def _layer_name(idx: int, layer: LayerSpec) -> str:
    return "{}:{}".format(idx, layer.kind)


def param_count(spec: NetworkSpec) -> typing.List[typing.Tuple[str, int]]:
    """Closed-form trainable-parameter counts per layer.

    SNU layers hold (m + 1) n parameters with a fixed shared decay and
    (m + 2) n when every unit trains its own decay.
    """
    counts = []
    for idx, ((in_shape, _), layer) in enumerate(zip(spec.shapes(), spec.layers)):
        if layer.kind in (KIND_SNU, KIND_SSNU):
            m, n = int(np.prod(in_shape)), layer.units
            count = m * n + (n if layer.bias else 0) \
                + (n if layer.decay_mode == DECAY_PER_UNIT else 0)
        elif layer.kind == KIND_CONV_SNU:
            f = layer.filters
            count = f * in_shape[0] * layer.kernel * layer.kernel + (f if layer.bias else 0) \
                + (f if layer.decay_mode == DECAY_PER_UNIT else 0)
        elif layer.kind == KIND_MAXPOOL:
            count = 0
        elif layer.kind in RECURRENT_GATES:
            m = int(np.prod(in_shape))
            count = reference_counts(m, layer.units)[layer.kind]
        else:
            m, n = int(np.prod(in_shape)), layer.units
            count = m * n + (n if layer.bias else 0)
        counts.append((_layer_name(idx, layer), count))
    return counts


def enumerate_params(network: Network) -> typing.List[typing.Tuple[str, int]]:
    counts = []
    for idx, (layer_spec, layer) in enumerate(zip(network.spec.layers, network.layers)):
        counts.append((_layer_name(idx, layer_spec),
                       sum(tensor.size for _, tensor in layer.parameters())))
    return counts


def synapse_count(spec: NetworkSpec) -> int:
    """Weight-matrix entries only; each needs two devices on a differential crossbar.

    Recurrent baseline layers never go on a crossbar and add nothing.
    """
    total = 0
    for (in_shape, _), layer in zip(spec.shapes(), spec.layers):
        if layer.kind == KIND_CONV_SNU:
            total += layer.filters * in_shape[0] * layer.kernel * layer.kernel
        elif layer.kind not in (KIND_MAXPOOL,) + tuple(RECURRENT_GATES):
            total += int(np.prod(in_shape)) * layer.units
    return total


def reference_counts(m: int, n: int) -> typing.Dict[str, int]:
    return dict(
        snu=(m + 1) * n,
        rnn=n * (m + n + 1),
        gru=3 * n * (m + n + 1),
        lstm=4 * n * (m + n + 1),
    )
