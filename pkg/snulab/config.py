import hashlib
import json
import logging
import os
import typing

import snulab.autodiff as ad
import snulab.optim
import snulab.pcm
import snulab.units


logger = logging.getLogger(__name__)


TASK_CLASSIFY = "classify"
TASK_SEQUENCE = "sequence"
TASKS = (TASK_CLASSIFY, TASK_SEQUENCE)
BACKENDS = ("ideal", "pcm")
DEFAULT_LOSS = {TASK_CLASSIFY: ad.OP_SOFTMAX_XENT, TASK_SEQUENCE: ad.OP_BERNOULLI_NLL}


class ConfigException(Exception):

    def __init__(self, message):
        super().__init__(message)


def _check_keys(section: str, raw, allowed: typing.Iterable[str]) -> dict:
    if raw is None:
        return dict()
    if not isinstance(raw, dict):
        raise ConfigException("Section {} must be an object".format(section))
    unknown = sorted(set(raw.keys()) - set(allowed))
    if unknown:
        raise ConfigException("Unknown keys in {}: {}".format(section, ", ".join(unknown)))
    return raw


def _number(section: str, name: str, value, minimum=None, integer=False, allow_none=False,
            strictly_positive=False):
    if value is None and allow_none:
        return None
    kinds = (int,) if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ConfigException("{}.{} must be {}".format(
            section, name, "an integer" if integer else "a number"))
    if minimum is not None and value < minimum:
        raise ConfigException("{}.{} must be at least {}".format(section, name, minimum))
    if strictly_positive and not value > 0:
        raise ConfigException("{}.{} must be positive".format(section, name))
    return value if integer else float(value)


def _flag(section: str, name: str, value) -> bool:
    if not isinstance(value, bool):
        raise ConfigException("{}.{} must be true or false".format(section, name))
    return value


def _resolve(base_dir: str, path):
    if path is None:
        return None
    if not isinstance(path, str):
        raise ConfigException("Paths must be strings, got {!r}".format(path))
    return os.path.normpath(os.path.join(base_dir, path))


class DataConfig(object):

    __slots__ = ("task", "train_images", "train_labels", "test_images", "test_labels",
                 "pianoroll", "n_s", "n_p", "train_limit", "test_limit", "valid_size")

    KEYS = __slots__

    def __init__(self, task, train_images=None, train_labels=None, test_images=None,
                 test_labels=None, pianoroll=None, n_s=20, n_p=20, train_limit=None,
                 test_limit=None, valid_size=0):
        self.task = task
        self.train_images = train_images
        self.train_labels = train_labels
        self.test_images = test_images
        self.test_labels = test_labels
        self.pianoroll = pianoroll
        self.n_s = n_s
        self.n_p = n_p
        self.train_limit = train_limit
        self.test_limit = test_limit
        self.valid_size = valid_size

    @classmethod
    def parse(cls, raw, base_dir: str = "."):
        raw = _check_keys("data", raw, cls.KEYS)
        task = raw.get("task")
        if task not in TASKS:
            raise ConfigException("data.task must be one of {}".format(", ".join(TASKS)))

        paths = dict()
        for name in ("train_images", "train_labels", "test_images", "test_labels", "pianoroll"):
            paths[name] = _resolve(base_dir, raw.get(name))
        if task == TASK_CLASSIFY:
            missing = [name for name in ("train_images", "train_labels", "test_images",
                                         "test_labels") if paths[name] is None]
            if missing:
                raise ConfigException("Classification data needs {}".format(", ".join(missing)))
        elif paths["pianoroll"] is None:
            raise ConfigException("Sequence data needs data.pianoroll")

        return cls(
            task,
            n_s=_number("data", "n_s", raw.get("n_s", 20), minimum=1, integer=True),
            n_p=_number("data", "n_p", raw.get("n_p", 20), minimum=0, integer=True),
            train_limit=_number("data", "train_limit", raw.get("train_limit"), minimum=1,
                                integer=True, allow_none=True),
            test_limit=_number("data", "test_limit", raw.get("test_limit"), minimum=1,
                               integer=True, allow_none=True),
            valid_size=_number("data", "valid_size", raw.get("valid_size", 0), minimum=0,
                               integer=True),
            **paths
        )

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.KEYS}


class TrainConfig(object):

    __slots__ = ("optimizer", "lr", "hyper", "batch_size", "epochs", "bptt_window", "grad_clip",
                 "seed", "loss", "max_batches")

    HYPER_KEYS = ("rho", "beta1", "beta2", "eps")
    KEYS = ("optimizer", "lr", "batch_size", "epochs", "bptt_window", "grad_clip", "seed",
            "loss", "max_batches") + HYPER_KEYS

    def __init__(self, optimizer="adam", lr=1e-3, hyper=None, batch_size=32, epochs=10,
                 bptt_window=0, grad_clip=None, seed=0, loss=None, max_batches=None):
        self.optimizer = optimizer
        self.lr = lr
        self.hyper = dict(hyper) if hyper else dict()
        self.batch_size = batch_size
        self.epochs = epochs
        self.bptt_window = bptt_window
        self.grad_clip = grad_clip
        self.seed = seed
        self.loss = loss
        self.max_batches = max_batches

    @classmethod
    def parse(cls, raw, task: str = TASK_SEQUENCE):
        raw = _check_keys("train", raw, cls.KEYS)
        optimizer = raw.get("optimizer", "adam")
        if optimizer not in snulab.optim.OPTIMIZERS:
            raise ConfigException("train.optimizer must be one of {}".format(
                ", ".join(snulab.optim.OPTIMIZERS)))

        # zero is accepted so a run can be replayed with frozen parameters
        lr = _number("train", "lr", raw.get("lr", 1e-3), minimum=0)
        hyper = dict(snulab.optim.DEFAULT_HYPERPARAMETERS[optimizer])
        for name in cls.HYPER_KEYS:
            if name in raw:
                if name not in hyper:
                    raise ConfigException("train.{} does not apply to {}".format(name, optimizer))
                hyper[name] = _number("train", name, raw[name], minimum=0)

        loss = raw.get("loss", DEFAULT_LOSS[task])
        if loss != DEFAULT_LOSS[task]:
            raise ConfigException("train.loss {} does not fit the {} task, use {}".format(
                loss, task, DEFAULT_LOSS[task]))

        return cls(
            optimizer=optimizer,
            lr=lr,
            hyper=hyper,
            batch_size=_number("train", "batch_size", raw.get("batch_size", 32), minimum=1,
                               integer=True),
            epochs=_number("train", "epochs", raw.get("epochs", 10), minimum=1, integer=True),
            bptt_window=_number("train", "bptt_window", raw.get("bptt_window", 0), minimum=0,
                                integer=True),
            grad_clip=_number("train", "grad_clip", raw.get("grad_clip"), allow_none=True,
                              strictly_positive=True),
            seed=_number("train", "seed", raw.get("seed", 0), minimum=0, integer=True),
            loss=loss,
            max_batches=_number("train", "max_batches", raw.get("max_batches"), minimum=1,
                                integer=True, allow_none=True),
        )

    def to_dict(self) -> dict:
        result = dict(
            optimizer=self.optimizer,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            bptt_window=self.bptt_window,
            grad_clip=self.grad_clip,
            seed=self.seed,
            loss=self.loss,
            max_batches=self.max_batches,
        )
        result.update(self.hyper)
        return result


class BackendConfig(object):

    __slots__ = ("kind", "rebalance_every", "batch_seconds", "device")

    KEYS = ("kind", "rebalance_every", "batch_seconds") + \
        tuple(snulab.pcm.PcmDeviceConfig.DEFAULTS.keys())

    def __init__(self, kind="ideal", rebalance_every=0, batch_seconds=1.0, device=None):
        self.kind = kind
        self.rebalance_every = rebalance_every
        self.batch_seconds = batch_seconds
        self.device = device if device is not None else snulab.pcm.PcmDeviceConfig()

    @classmethod
    def parse(cls, raw):
        raw = _check_keys("backend", raw, cls.KEYS)
        kind = raw.get("kind", "ideal")
        if kind not in BACKENDS:
            raise ConfigException("backend.kind must be one of {}".format(", ".join(BACKENDS)))

        device = dict()
        for name, default in snulab.pcm.PcmDeviceConfig.DEFAULTS.items():
            if name not in raw:
                continue
            if isinstance(default, bool):
                device[name] = _flag("backend", name, raw[name])
            elif name == "pulse_cap":
                device[name] = _number("backend", name, raw[name], minimum=1, integer=True)
            else:
                device[name] = _number("backend", name, raw[name], allow_none=(name == "beta"))
        try:
            device_config = snulab.pcm.PcmDeviceConfig(**device)
        except snulab.pcm.CrossbarConfigException as e:
            raise ConfigException("Invalid backend device parameters: {}".format(e))

        return cls(
            kind=kind,
            rebalance_every=_number("backend", "rebalance_every", raw.get("rebalance_every", 0),
                                    minimum=0, integer=True),
            batch_seconds=_number("backend", "batch_seconds", raw.get("batch_seconds", 1.0),
                                  minimum=0),
            device=device_config,
        )

    def to_dict(self) -> dict:
        result = dict(kind=self.kind, rebalance_every=self.rebalance_every,
                      batch_seconds=self.batch_seconds)
        result.update(self.device.to_dict())
        return result


class OutputConfig(object):

    __slots__ = ("dir", "record_wall_time", "histogram_bins", "histograms")

    KEYS = __slots__

    def __init__(self, dir="runs/default", record_wall_time=False, histogram_bins=41,
                 histograms=False):
        self.dir = dir
        self.record_wall_time = record_wall_time
        self.histogram_bins = histogram_bins
        self.histograms = histograms

    @classmethod
    def parse(cls, raw, base_dir: str = "."):
        raw = _check_keys("output", raw, cls.KEYS)
        return cls(
            dir=_resolve(base_dir, raw.get("dir", "runs/default")),
            record_wall_time=_flag("output", "record_wall_time",
                                   raw.get("record_wall_time", False)),
            histogram_bins=_number("output", "histogram_bins", raw.get("histogram_bins", 41),
                                   minimum=1, integer=True),
            histograms=_flag("output", "histograms", raw.get("histograms", False)),
        )

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.KEYS}


class CheckConfig(object):

    __slots__ = ("lif_neurons", "lif_steps", "lif_inputs", "grad_steps", "grad_batch",
                 "grad_samples", "grad_tolerance")

    DEFAULTS = dict(
        lif_neurons=100,
        lif_steps=10000,
        lif_inputs=20,
        grad_steps=8,
        grad_batch=2,
        grad_samples=200,
        grad_tolerance=1e-5,
    )

    def __init__(self, **kwargs):
        for name, default in self.DEFAULTS.items():
            setattr(self, name, kwargs.get(name, default))

    @classmethod
    def parse(cls, raw):
        raw = _check_keys("check", raw, cls.DEFAULTS.keys())
        values = dict()
        for name, default in cls.DEFAULTS.items():
            value = raw.get(name, default)
            if name == "grad_tolerance":
                values[name] = _number("check", name, value, strictly_positive=True)
            else:
                values[name] = _number("check", name, value, minimum=1, integer=True)
        return cls(**values)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.DEFAULTS}


class RunConfigFile(object):
    """A parsed run configuration with every default filled in."""

    __slots__ = ("network", "data", "train", "backend", "output", "check", "source")

    SECTIONS = ("network", "data", "train", "backend", "output", "check")

    def __init__(self, network, data, train, backend, output, check, source=None):
        self.network = network
        self.data = data
        self.train = train
        self.backend = backend
        self.output = output
        self.check = check
        self.source = source

    @classmethod
    def parse(cls, raw, base_dir: str = ".", source=None):
        raw = _check_keys("config", raw, cls.SECTIONS)
        if "network" not in raw or "data" not in raw:
            raise ConfigException("A run configuration needs network and data sections")

        try:
            network = snulab.units.NetworkSpec.parse(raw["network"])
        except snulab.units.NetworkSpecException as e:
            raise ConfigException("Invalid network: {}".format(e))
        data = DataConfig.parse(raw["data"], base_dir)

        return cls(
            network,
            data,
            TrainConfig.parse(raw.get("train"), data.task),
            BackendConfig.parse(raw.get("backend")),
            OutputConfig.parse(raw.get("output"), base_dir),
            CheckConfig.parse(raw.get("check")),
            source=source,
        )

    @classmethod
    def load(cls, path: str):
        try:
            with open(path, "r") as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigException("Cannot read config {}: {}".format(path, e.strerror))
        except ValueError as e:
            raise ConfigException("Config {} is not valid JSON: {}".format(path, e))

        config = cls.parse(raw, os.path.dirname(os.path.abspath(path)), source=path)
        logger.info("Loaded config {} ({} task, {} backend)".format(
            path, config.data.task, config.backend.kind))
        return config

    def apply_overrides(self, seed=None, out=None, backend=None):
        if seed is not None:
            if seed < 0:
                raise ConfigException("--seed must not be negative")
            self.train.seed = seed
        if out is not None:
            self.output.dir = os.path.normpath(os.path.abspath(out))
        if backend is not None:
            if backend not in BACKENDS:
                raise ConfigException("--backend must be one of {}".format(", ".join(BACKENDS)))
            self.backend.kind = backend

    def to_dict(self) -> dict:
        return dict(
            network=self.network.to_dict(),
            data=self.data.to_dict(),
            train=self.train.to_dict(),
            backend=self.backend.to_dict(),
            output=self.output.to_dict(),
            check=self.check.to_dict(),
        )

    def fingerprint(self) -> str:
        """Hash of everything that determines results; the output location is excluded."""
        relevant = self.to_dict()
        del relevant["output"]
        encoded = json.dumps(relevant, sort_keys=True).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()

    def write(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info("Wrote effective config {}".format(path))
