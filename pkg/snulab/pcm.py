"""Simulated phase-change-memory crossbars with 2-PCM differential synapses.

Each weight is realized as w = beta * (G+ - G-). Crystallizing pulses only raise
a device's conductance; weight decreases therefore pulse the G- device, and
saturated pairs are periodically reset and reprogrammed.
"""
import csv
import logging
import math
import os
import typing

import numpy as np

import snulab.autodiff as ad
import snulab.container


logger = logging.getLogger(__name__)


CROSSBAR_CONTAINER_KIND = "crossbar"
POLARITY_PLUS = 0
POLARITY_MINUS = 1
READ_STREAM = 2
RESET_STREAM = 3


class CrossbarConfigException(Exception):

    def __init__(self, message):
        super().__init__(message)


class PcmDeviceConfig(object):

    __slots__ = ("g_min", "g_max", "mu_set", "sigma_set", "sigma_read", "sigma_reset", "nu",
                 "drift", "drift_t0", "pulse_cap", "rebalance_threshold", "quantize", "beta")

    DEFAULTS = dict(
        g_min=0.1,
        g_max=10.0,
        mu_set=0.2,
        sigma_set=0.06,
        sigma_read=0.05,
        sigma_reset=0.0,
        nu=0.03,
        drift=True,
        drift_t0=1.0,
        pulse_cap=20,
        rebalance_threshold=0.9,
        quantize=True,
        beta=None,
    )

    def __init__(self, **kwargs):
        unknown = sorted(set(kwargs.keys()) - set(self.DEFAULTS.keys()))
        if unknown:
            raise CrossbarConfigException("Unknown device parameters: {}".format(
                ", ".join(unknown)))
        for name, default in self.DEFAULTS.items():
            setattr(self, name, kwargs.get(name, default))
        self.validate()

    def validate(self):
        if not 0 <= self.g_min < self.g_max:
            raise CrossbarConfigException("Need 0 <= g_min < g_max")
        if self.mu_set <= 0:
            raise CrossbarConfigException("mu_set must be positive")
        for name in ("sigma_set", "sigma_read", "sigma_reset", "nu"):
            if getattr(self, name) < 0:
                raise CrossbarConfigException("{} must not be negative".format(name))
        if self.drift_t0 <= 0:
            raise CrossbarConfigException("drift_t0 must be positive")
        if not isinstance(self.pulse_cap, int) or self.pulse_cap < 1:
            raise CrossbarConfigException("pulse_cap must be a positive integer")
        if not 0 < self.rebalance_threshold <= 1:
            raise CrossbarConfigException("rebalance_threshold must lie in (0, 1]")
        if self.beta is not None and self.beta <= 0:
            raise CrossbarConfigException("beta must be positive")

    @property
    def scale(self) -> float:
        """Weight units per microsiemens; by default the full differential range maps to [-1, 1]."""
        if self.beta is not None:
            return float(self.beta)
        return 1.0 / (self.g_max - self.g_min)

    @property
    def noise_free(self) -> bool:
        return self.sigma_set == 0 and self.sigma_read == 0 and self.sigma_reset == 0 and \
            (not self.drift or self.nu == 0)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.DEFAULTS}


class CrossbarPair(object):

    def __init__(self, shape, config: PcmDeviceConfig, seed: int = 0, stream_key: int = 0):
        self.shape = tuple(shape)
        self.config = config
        self.seed = seed
        self.stream_key = stream_key
        self.g_plus = np.full(self.shape, config.g_min)
        self.g_minus = np.full(self.shape, config.g_min)
        self.pulses_plus = np.zeros(self.shape, dtype=np.int64)
        self.pulses_minus = np.zeros(self.shape, dtype=np.int64)
        self.t_ref_plus = np.zeros(self.shape)
        self.t_ref_minus = np.zeros(self.shape)
        self.clock = 0.0
        self._rngs = [np.random.default_rng([seed, stream_key, stream])
                      for stream in (POLARITY_PLUS, POLARITY_MINUS, READ_STREAM, RESET_STREAM)]

    @property
    def beta(self) -> float:
        return self.config.scale

    @property
    def device_count(self) -> int:
        return 2 * int(np.prod(self.shape, dtype=np.int64))

    def advance(self, seconds: float):
        self.clock += seconds

    def _drifted(self, g: np.ndarray, t_ref: np.ndarray) -> np.ndarray:
        if not self.config.drift or self.config.nu == 0:
            return g
        t0 = self.config.drift_t0
        factor = ((self.clock - t_ref + t0) / t0) ** (-self.config.nu)
        return np.clip(g * factor, self.config.g_min, self.config.g_max)

    def conductances(self) -> typing.Tuple[np.ndarray, np.ndarray]:
        return (self._drifted(self.g_plus, self.t_ref_plus),
                self._drifted(self.g_minus, self.t_ref_minus))

    def effective_weights(self) -> np.ndarray:
        g_plus, g_minus = self.conductances()
        return self.beta * (g_plus - g_minus)

    def read(self) -> np.ndarray:
        g_plus, g_minus = self.conductances()
        sigma = self.config.sigma_read
        if sigma > 0:
            rng = self._rngs[READ_STREAM]
            g_plus = g_plus + rng.normal(0.0, sigma, self.shape)
            g_minus = g_minus + rng.normal(0.0, sigma, self.shape)
        return self.beta * (g_plus - g_minus)

    def _commit_drift(self, plus_mask: np.ndarray, minus_mask: np.ndarray):
        g_plus, g_minus = self.conductances()
        self.g_plus = np.where(plus_mask, g_plus, self.g_plus)
        self.g_minus = np.where(minus_mask, g_minus, self.g_minus)
        self.t_ref_plus = np.where(plus_mask, self.clock, self.t_ref_plus)
        self.t_ref_minus = np.where(minus_mask, self.clock, self.t_ref_minus)

    def _pulse(self, plus_mask: np.ndarray, minus_mask: np.ndarray):
        cfg = self.config
        for polarity, mask in ((POLARITY_PLUS, plus_mask), (POLARITY_MINUS, minus_mask)):
            increment = np.maximum(self._rngs[polarity].normal(cfg.mu_set, cfg.sigma_set,
                                                               self.shape), 0.0)
            if polarity == POLARITY_PLUS:
                self.g_plus = np.where(mask, np.minimum(self.g_plus + increment, cfg.g_max),
                                       self.g_plus)
                self.pulses_plus += mask
            else:
                self.g_minus = np.where(mask, np.minimum(self.g_minus + increment, cfg.g_max),
                                        self.g_minus)
                self.pulses_minus += mask

    def _check_shape(self, array: np.ndarray):
        if array.shape != self.shape:
            raise CrossbarConfigException("Update {} does not match crossbar {}".format(
                array.shape, self.shape))

    def program(self, delta_w) -> int:
        """Open-loop update; returns the number of pulses applied."""
        delta_w = np.asarray(delta_w, dtype=np.float64)
        self._check_shape(delta_w)
        cfg = self.config

        if not cfg.quantize:
            plus, minus = delta_w > 0, delta_w < 0
            self._commit_drift(plus, minus)
            self.g_plus = np.minimum(self.g_plus + np.where(plus, delta_w, 0.0) / self.beta,
                                     cfg.g_max)
            self.g_minus = np.minimum(self.g_minus + np.where(minus, -delta_w, 0.0) / self.beta,
                                      cfg.g_max)
            return 0

        pulses = np.minimum(np.rint(np.abs(delta_w) / (self.beta * cfg.mu_set)),
                            cfg.pulse_cap).astype(np.int64)
        plus = (delta_w > 0) & (pulses > 0)
        minus = (delta_w < 0) & (pulses > 0)
        if not (plus.any() or minus.any()):
            return 0

        self._commit_drift(plus, minus)
        for k in range(int(pulses.max())):
            active = pulses > k
            self._pulse(plus & active, minus & active)
        return int(pulses[plus | minus].sum())

    def _program_verify(self, target: np.ndarray, mask: np.ndarray) -> int:
        """Pulse the masked pairs until each is within half a pulse of its target weight."""
        cfg = self.config
        if not cfg.quantize:
            g_plus = cfg.g_min + np.maximum(target, 0.0) / self.beta
            g_minus = cfg.g_min + np.maximum(-target, 0.0) / self.beta
            self.g_plus = np.where(mask, np.minimum(g_plus, cfg.g_max), self.g_plus)
            self.g_minus = np.where(mask, np.minimum(g_minus, cfg.g_max), self.g_minus)
            return 0

        half = cfg.mu_set / 2.0
        limit = 2 * int(math.ceil((cfg.g_max - cfg.g_min) / cfg.mu_set)) + cfg.pulse_cap
        applied = 0
        for _ in range(limit):
            remaining = target / self.beta - (self.g_plus - self.g_minus)
            plus = mask & (remaining >= half) & (self.g_plus < cfg.g_max)
            minus = mask & (remaining <= -half) & (self.g_minus < cfg.g_max)
            if not (plus.any() or minus.any()):
                break
            self._pulse(plus, minus)
            applied += int(plus.sum() + minus.sum())
        return applied

    def reset(self, mask: np.ndarray):
        cfg = self.config
        rng = self._rngs[RESET_STREAM]
        for attr in ("g_plus", "g_minus"):
            value = cfg.g_min + np.abs(rng.normal(0.0, cfg.sigma_reset, self.shape)) \
                if cfg.sigma_reset > 0 else np.full(self.shape, cfg.g_min)
            setattr(self, attr, np.where(mask, np.clip(value, cfg.g_min, cfg.g_max),
                                         getattr(self, attr)))
        self.pulses_plus = np.where(mask, 0, self.pulses_plus)
        self.pulses_minus = np.where(mask, 0, self.pulses_minus)
        self.t_ref_plus = np.where(mask, self.clock, self.t_ref_plus)
        self.t_ref_minus = np.where(mask, self.clock, self.t_ref_minus)

    def initialize(self, weights):
        weights = np.asarray(weights, dtype=np.float64)
        self._check_shape(weights)
        everything = np.ones(self.shape, dtype=bool)
        self.reset(everything)
        self._program_verify(weights, everything)

    def rebalance(self) -> int:
        threshold = self.config.rebalance_threshold * self.config.g_max
        g_plus, g_minus = self.conductances()
        mask = (g_plus > threshold) | (g_minus > threshold)
        count = int(mask.sum())
        if count == 0:
            return 0

        target = self.beta * (g_plus - g_minus)
        self.reset(mask)
        self._program_verify(target, mask)
        return count


def crossbar_read(cb: CrossbarPair) -> np.ndarray:
    return cb.read()


def crossbar_program(cb: CrossbarPair, delta_w) -> int:
    return cb.program(delta_w)


def crossbar_rebalance(cb: CrossbarPair) -> int:
    return cb.rebalance()


def save_crossbar(cb: CrossbarPair, path: str, layer: str = ""):
    snulab.container.write_container(
        path,
        CROSSBAR_CONTAINER_KIND,
        dict(
            layer=layer,
            shape=list(cb.shape),
            seed=cb.seed,
            stream_key=cb.stream_key,
            clock=cb.clock,
            device=cb.config.to_dict(),
            rng_states=[rng.bit_generator.state for rng in cb._rngs],
        ),
        [
            snulab.container.Block("g_plus", cb.g_plus),
            snulab.container.Block("g_minus", cb.g_minus),
            snulab.container.Block("t_ref_plus", cb.t_ref_plus),
            snulab.container.Block("t_ref_minus", cb.t_ref_minus),
            snulab.container.Block("pulses_plus", cb.pulses_plus.astype(np.float64)),
            snulab.container.Block("pulses_minus", cb.pulses_minus.astype(np.float64)),
        ],
    )


def load_crossbar(path: str) -> CrossbarPair:
    header, arrays = snulab.container.read_container(path, CROSSBAR_CONTAINER_KIND)
    try:
        config = PcmDeviceConfig(**header["device"])
        cb = CrossbarPair(header["shape"], config, header["seed"], header["stream_key"])
        for name in ("g_plus", "g_minus", "t_ref_plus", "t_ref_minus"):
            if arrays[name].shape != cb.shape:
                raise snulab.container.ContainerException(
                    "Block {} in {} does not match shape {}".format(name, path, cb.shape))
        for rng, state in zip(cb._rngs, header["rng_states"]):
            rng.bit_generator.state = state
    except (KeyError, TypeError, ValueError, CrossbarConfigException):
        raise snulab.container.ContainerException("Corrupted crossbar header in {}".format(path))

    cb.g_plus = arrays["g_plus"]
    cb.g_minus = arrays["g_minus"]
    cb.t_ref_plus = arrays["t_ref_plus"]
    cb.t_ref_minus = arrays["t_ref_minus"]
    cb.pulses_plus = arrays["pulses_plus"].astype(np.int64)
    cb.pulses_minus = arrays["pulses_minus"].astype(np.int64)
    cb.clock = float(header["clock"])
    return cb


def layer_label(name: str) -> str:
    """"layers.3.weight" -> "3"."""
    parts = name.split(".")
    return parts[1] if len(parts) == 3 else name


def weight_histogram(weights: np.ndarray, bins: int = 41,
                     limit: float = 1.0) -> typing.List[typing.Tuple[float, float, int]]:
    counts, edges = np.histogram(np.clip(weights, -limit, limit), bins=bins, range=(-limit, limit))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def write_histogram(path: str, weights: np.ndarray, bins: int = 41):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("bin_lo", "bin_hi", "count"))
        for lo, hi, count in weight_histogram(weights, bins):
            writer.writerow(("{:.6f}".format(lo), "{:.6f}".format(hi), count))


class IdealBackend(object):
    """Weights live in software and take optimizer increments directly."""

    kind = "ideal"

    def attach(self, network):
        self.network = network
        return self

    def refresh(self):
        pass

    def apply(self, name: str, tensor: ad.Tensor, delta: np.ndarray):
        tensor.data += delta

    def after_batch(self):
        pass

    def end_epoch(self, epoch: int):
        pass

    def finalize(self):
        pass

    def crossbars(self) -> typing.Dict[str, CrossbarPair]:
        return dict()


class PcmBackend(object):
    """Hardware-in-the-loop weights: forward reads the crossbars, updates become pulses.

    Biases and decays stay ideal software parameters.
    """

    kind = "pcm"

    def __init__(self, config: PcmDeviceConfig, seed: int = 0, rebalance_every: int = 0,
                 batch_seconds: float = 1.0):
        if rebalance_every < 0:
            raise CrossbarConfigException("rebalance_every must not be negative")
        self.config = config
        self.seed = seed
        self.rebalance_every = rebalance_every
        self.batch_seconds = batch_seconds
        self.batches = 0
        self._crossbars: typing.Dict[str, CrossbarPair] = dict()
        self._tensors: typing.Dict[str, ad.Tensor] = dict()

    def attach(self, network):
        self.network = network
        for key, (name, tensor) in enumerate(network.weight_parameters()):
            cb = CrossbarPair(tensor.shape, self.config, self.seed, key)
            cb.initialize(tensor.data)
            self._crossbars[name] = cb
            self._tensors[name] = tensor
        logger.info("Mapped {} synaptic weights to {} PCM devices".format(
            sum(t.size for t in self._tensors.values()),
            sum(cb.device_count for cb in self._crossbars.values())))
        self.refresh()
        return self

    def crossbars(self) -> typing.Dict[str, CrossbarPair]:
        return dict(self._crossbars)

    def refresh(self):
        for name, cb in self._crossbars.items():
            tensor = self._tensors[name]
            if tensor.shape != cb.shape:
                raise CrossbarConfigException("Weight {} {} does not match its crossbar {}".format(
                    name, tensor.shape, cb.shape))
            tensor.data[...] = cb.read()

    def apply(self, name: str, tensor: ad.Tensor, delta: np.ndarray):
        if name in self._crossbars:
            self._crossbars[name].program(delta)
        else:
            tensor.data += delta

    def rebalance(self) -> int:
        total = sum(cb.rebalance() for cb in self._crossbars.values())
        if total:
            logger.info("Rebalanced {} saturated synapses".format(total))
        return total

    def after_batch(self):
        self.batches += 1
        for cb in self._crossbars.values():
            cb.advance(self.batch_seconds)
        if self.rebalance_every and self.batches % self.rebalance_every == 0:
            self.rebalance()

    def end_epoch(self, epoch: int):
        if not self.rebalance_every:
            self.rebalance()

    def finalize(self):
        for name, cb in self._crossbars.items():
            self._tensors[name].data[...] = cb.effective_weights()

    def save(self, directory: str) -> typing.List[str]:
        paths = []
        for name, cb in self._crossbars.items():
            path = os.path.join(directory, "crossbar_{}.pcm".format(layer_label(name)))
            save_crossbar(cb, path, layer=name)
            paths.append(path)
        return paths


def hwloop_adapter(network, config: PcmDeviceConfig, seed: int = 0, rebalance_every: int = 0,
                   batch_seconds: float = 1.0) -> PcmBackend:
    return PcmBackend(config, seed, rebalance_every, batch_seconds).attach(network)
