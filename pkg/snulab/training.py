"""Backpropagation-through-time training, evaluation and checkpoints."""
import csv
import logging
import math
import time
import typing

import numpy as np

import snulab.autodiff as ad
import snulab.config
import snulab.container
import snulab.data
import snulab.optim
import snulab.pcm
import snulab.units


logger = logging.getLogger(__name__)


CSV_COLUMNS = ("epoch", "train_loss", "valid_loss", "metric", "wall_seconds")
CHECKPOINT_CONTAINER_KIND = "checkpoint"
EVAL_LANES = 32
EVAL_CHUNK = 1024

# second seed component for encodings that do not depend on the epoch
VALID_STREAM_KEY = 1000003
TEST_STREAM_KEY = 1000033


class TrainingAbortedException(Exception):

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class EpochRow(object):

    __slots__ = CSV_COLUMNS
    epoch: int
    train_loss: float
    valid_loss: float
    metric: float
    wall_seconds: float

    def __init__(self, epoch, train_loss, valid_loss, metric, wall_seconds=0.0):
        self.epoch = epoch
        self.train_loss = train_loss
        self.valid_loss = valid_loss
        self.metric = metric
        self.wall_seconds = wall_seconds

    def values(self) -> tuple:
        return tuple(getattr(self, name) for name in CSV_COLUMNS)


class RunRecord(object):

    __slots__ = ("rows", "seed", "config_hash")

    def __init__(self, seed=0, config_hash=""):
        self.rows: typing.List[EpochRow] = []
        self.seed = seed
        self.config_hash = config_hash

    def add(self, row: EpochRow):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ad.ContractException("Epoch {} does not follow epoch {}".format(
                row.epoch, self.rows[-1].epoch))
        self.rows.append(row)

    @property
    def final(self) -> typing.Optional[EpochRow]:
        return self.rows[-1] if self.rows else None

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([row.epoch] + [repr(float(v)) for v in row.values()[1:]])
        logger.info("Wrote {} epochs to {}".format(len(self.rows), path))

    @classmethod
    def read_csv(cls, path: str):
        record = cls()
        with open(path, "r", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header) != CSV_COLUMNS:
                raise snulab.data.DatasetFormatException("{} is not a run curve".format(path))
            for line in reader:
                try:
                    record.add(EpochRow(int(line[0]), *(float(v) for v in line[1:])))
                except (IndexError, ValueError):
                    raise snulab.data.DatasetFormatException("Malformed row in {}: {}".format(
                        path, ",".join(line)))
        return record

    def to_dict(self) -> dict:
        return dict(seed=self.seed, config_hash=self.config_hash,
                    rows=[dict(zip(CSV_COLUMNS, row.values())) for row in self.rows])


class Batch(object):

    __slots__ = ("inputs", "targets", "mask", "weight")

    def __init__(self, inputs, targets, mask, weight):
        self.inputs = inputs
        self.targets = targets
        self.mask = mask
        self.weight = weight


def _one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ad.DimensionException("Labels outside the {} output classes".format(classes))
    return np.eye(classes)[labels]


def _output_units(network: snulab.units.Network) -> int:
    return int(np.prod(network.spec.shapes()[-1][1]))


def check_input(network: snulab.units.Network, features: typing.Tuple[int, ...]):
    expected = network.spec.input_shape
    if int(np.prod(features)) != int(np.prod(expected)):
        raise ad.DimensionException("Data frames {} do not match network input {}".format(
            tuple(features), tuple(expected)))


def _unroll(network: snulab.units.Network, frames, bptt_window: int,
            on_output: typing.Callable[[int, ad.Tensor], None]):
    """Step through ``frames`` [time x batch x ...], detaching the state every window."""
    for t in range(len(frames)):
        if bptt_window and t and t % bptt_window == 0:
            network.detach_state()
        on_output(t, network.step(frames[t]))


def _classify_stream(network: snulab.units.Network,
                     stream: snulab.data.SpikeStream,
                     reset: bool = True) -> typing.Tuple[int, int]:
    if reset:
        network.reset_state(stream.lanes)
    outputs = np.zeros((stream.time, stream.lanes, _output_units(network)))
    with ad.no_grad():
        for t in range(stream.time):
            outputs[t] = network.step(stream.step(t)).data.reshape(stream.lanes, -1)

    correct, total = 0, 0
    for segment in stream.segments:
        for lane, label in enumerate(segment.labels):
            if label == snulab.data.NO_LABEL:
                continue
            total += 1
            correct += int(snulab.data.readout_counts(outputs, segment, lane) == label)
    return correct, total


def evaluate_classification(network: snulab.units.Network,
                            stream: snulab.data.SpikeStream,
                            reset: bool = True) -> float:
    """Accuracy over the labelled segments; state carries across segments of a lane."""
    correct, total = _classify_stream(network, stream, reset)
    return correct / total if total else 0.0


def evaluate_images(network: snulab.units.Network, images, labels, n_s: int, n_p: int,
                    seed, lanes: int = EVAL_LANES, chunk: int = EVAL_CHUNK) -> float:
    """Encode and classify in chunks; each lane stays one continuous stream."""
    correct, total = 0, 0
    chunk = max(chunk - chunk % lanes, lanes)
    for start in range(0, len(labels), chunk):
        ids = np.arange(start, min(start + chunk, len(labels)))
        stream = snulab.data.rate_encode(images[ids], n_s, n_p, seed,
                                         labels=[labels[i] for i in ids], lanes=lanes,
                                         sample_ids=ids)
        c, t = _classify_stream(network, stream, reset=(start == 0))
        correct += c
        total += t
    return correct / total if total else 0.0


def _pad_sequences(rolls: typing.Sequence[np.ndarray]) -> Batch:
    pairs = [snulab.data.next_step_pairs(roll) for roll in rolls]
    length = max(len(x) for x, _ in pairs)
    features = rolls[0].shape[1]
    inputs = np.zeros((length, len(rolls), features))
    targets = np.zeros((length, len(rolls), features))
    mask = np.zeros((length, len(rolls)))
    for lane, (x, y) in enumerate(pairs):
        inputs[:len(x), lane] = x
        targets[:len(y), lane] = y
        mask[:len(x), lane] = 1.0
    return Batch(inputs, targets, mask, float(mask.sum()))


def _sequence_loss_sum(network: snulab.units.Network, batch: Batch, loss_kind: str,
                       bptt_window: int = 0) -> ad.Tensor:
    network.reset_state(batch.inputs.shape[1])
    terms = []

    def on_output(t, output):
        terms.append(ad.loss(loss_kind, output, batch.targets[t], mask=batch.mask[t],
                             reduction="sum"))

    _unroll(network, batch.inputs, bptt_window, on_output)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def evaluate_sequence(network: snulab.units.Network,
                      rolls: typing.Sequence[np.ndarray],
                      loss_kind: str = ad.OP_BERNOULLI_NLL,
                      batch_size: int = 32) -> float:
    """Mean per-frame loss over every predicted frame of every sequence."""
    rolls = [roll for roll in rolls if len(roll) > 1]
    if not rolls:
        raise ad.ContractException("No sequence with at least two frames to evaluate")
    total, frames = 0.0, 0.0
    with ad.no_grad():
        for start in range(0, len(rolls), batch_size):
            batch = _pad_sequences(rolls[start:start + batch_size])
            total += _sequence_loss_sum(network, batch, loss_kind).item()
            frames += batch.weight
    return total / frames


def perplexity(nll_per_token) -> float:
    """exp of the mean negative log-likelihood in nats."""
    values = np.asarray(nll_per_token, dtype=np.float64)
    if values.size == 0:
        raise ad.ContractException("Perplexity of an empty sequence")
    return math.exp(float(values.mean()))


class ClassificationTask(object):
    """Rate-coded images, one presentation per batch element, loss on spike counts."""

    def __init__(self, images, labels, test_images, test_labels, n_s, n_p, seed=0,
                 valid_size=0, loss_kind=ad.OP_SOFTMAX_XENT):
        if valid_size >= len(labels):
            raise snulab.data.DatasetFormatException(
                "Validation split of {} leaves no training images".format(valid_size))
        split = len(labels) - valid_size
        self.images, self.labels = images[:split], list(labels[:split])
        self.valid_images, self.valid_labels = images[split:], list(labels[split:])
        self.test_images, self.test_labels = test_images, list(test_labels)
        self.n_s = n_s
        self.n_p = n_p
        self.seed = seed
        self.loss_kind = loss_kind

    @property
    def frame_shape(self) -> typing.Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def batches(self, epoch: int, batch_size: int) -> typing.Iterator[Batch]:
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.labels))
        for start in range(0, len(order), batch_size):
            ids = order[start:start + batch_size]
            stream = snulab.data.rate_encode(self.images[ids], self.n_s, 0, [self.seed, epoch],
                                             lanes=len(ids), sample_ids=ids)
            yield Batch(stream.data[:self.n_s].astype(np.float64),
                        [self.labels[i] for i in ids], None, float(len(ids)))

    def _count_loss(self, network, batch: Batch, bptt_window: int) -> ad.Tensor:
        network.reset_state(batch.inputs.shape[1])
        counts = []

        def on_output(t, output):
            counts.append(output if not counts else counts[-1] + output)

        _unroll(network, batch.inputs, bptt_window, on_output)
        target = _one_hot(batch.targets, _output_units(network))
        return ad.loss(self.loss_kind, counts[-1], target)

    def batch_loss(self, network, batch: Batch, bptt_window: int = 0) -> ad.Tensor:
        return self._count_loss(network, batch, bptt_window)

    def validation_loss(self, network, batch_size: int) -> float:
        images, labels = self.valid_images, self.valid_labels
        key = VALID_STREAM_KEY
        if not labels:
            images, labels, key = self.test_images, self.test_labels, TEST_STREAM_KEY
        if not labels:
            raise snulab.data.DatasetDomainException("No validation or test images to score")
        total = 0.0
        with ad.no_grad():
            for start in range(0, len(labels), batch_size):
                ids = np.arange(start, min(start + batch_size, len(labels)))
                stream = snulab.data.rate_encode(images[ids], self.n_s, 0, [self.seed, key],
                                                 lanes=len(ids), sample_ids=ids)
                batch = Batch(stream.data[:self.n_s].astype(np.float64),
                              [labels[i] for i in ids], None, float(len(ids)))
                total += self._count_loss(network, batch, 0).item() * batch.weight
        return total / len(labels)

    def metric(self, network) -> float:
        return evaluate_images(network, self.test_images, self.test_labels, self.n_s, self.n_p,
                               [self.seed, TEST_STREAM_KEY])


class SequenceTask(object):
    """Next-frame prediction on piano rolls, loss summed per frame and averaged over frames."""

    def __init__(self, train_rolls, valid_rolls, test_rolls, loss_kind=ad.OP_BERNOULLI_NLL,
                 seed=0):
        self.train_rolls = [roll for roll in train_rolls if len(roll) > 1]
        if not self.train_rolls:
            raise snulab.data.DatasetFormatException("No training sequence with two frames")
        self.valid_rolls = [roll for roll in valid_rolls if len(roll) > 1]
        self.test_rolls = [roll for roll in test_rolls if len(roll) > 1]
        self.loss_kind = loss_kind
        self.seed = seed

    @property
    def frame_shape(self) -> typing.Tuple[int, ...]:
        return (self.train_rolls[0].shape[1],)

    def batches(self, epoch: int, batch_size: int) -> typing.Iterator[Batch]:
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.train_rolls))
        for start in range(0, len(order), batch_size):
            yield _pad_sequences([self.train_rolls[i] for i in order[start:start + batch_size]])

    def batch_loss(self, network, batch: Batch, bptt_window: int = 0) -> ad.Tensor:
        return _sequence_loss_sum(network, batch, self.loss_kind, bptt_window) * \
            (1.0 / batch.weight)

    def validation_loss(self, network, batch_size: int) -> float:
        rolls = self.valid_rolls or self.test_rolls
        return evaluate_sequence(network, rolls, self.loss_kind, batch_size)

    def metric(self, network) -> float:
        return evaluate_sequence(network, self.test_rolls, self.loss_kind)


def build_task(data_config: snulab.config.DataConfig, train_config: snulab.config.TrainConfig):
    if data_config.task == snulab.config.TASK_CLASSIFY:
        images, labels = snulab.data.load_mnist(data_config.train_images, data_config.train_labels)
        test_images, test_labels = snulab.data.load_mnist(data_config.test_images,
                                                          data_config.test_labels)
        if data_config.train_limit:
            images, labels = images[:data_config.train_limit], labels[:data_config.train_limit]
        if data_config.test_limit:
            test_images = test_images[:data_config.test_limit]
            test_labels = test_labels[:data_config.test_limit]
        return ClassificationTask(images, labels, test_images, test_labels, data_config.n_s,
                                  data_config.n_p, train_config.seed, data_config.valid_size,
                                  train_config.loss)

    dataset = snulab.data.pianoroll_load(data_config.pianoroll)
    rolls = dict()
    for split in snulab.data.PIANOROLL_SPLITS:
        rolls[split] = snulab.data.pianoroll_vectorize(dataset, split) \
            if split in dataset.sequences else []
        if data_config.train_limit and split == "train":
            rolls[split] = rolls[split][:data_config.train_limit]
        if data_config.test_limit and split == "test":
            rolls[split] = rolls[split][:data_config.test_limit]
    if not rolls["test"]:
        raise snulab.data.DatasetFormatException("{} has no test split".format(
            data_config.pianoroll))
    return SequenceTask(rolls["train"], rolls["valid"], rolls["test"], train_config.loss,
                        train_config.seed)


def bptt_train(network: snulab.units.Network,
               task,
               cfg: snulab.config.TrainConfig,
               backend=None,
               record_wall_time: bool = False,
               config_hash: str = "",
               epoch_callback=None) -> typing.Tuple[snulab.units.Network, RunRecord]:
    """Train with states reset per batch, one backward pass over the unrolled graph per batch."""
    check_input(network, task.frame_shape)
    if backend is None:
        backend = snulab.pcm.IdealBackend().attach(network)
    if cfg.lr == 0:
        logger.warning("Learning rate is 0, parameters stay frozen")
    if cfg.bptt_window:
        logger.info("Truncating backpropagation every {} steps".format(cfg.bptt_window))

    optimizer = snulab.optim.Optimizer(cfg.optimizer, cfg.lr, **cfg.hyper)
    params = network.named_parameters()
    tensors = [tensor for _, tensor in params]
    record = RunRecord(cfg.seed, config_hash)

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        loss_total, weight_total = 0.0, 0.0
        for batch_idx, batch in enumerate(task.batches(epoch, cfg.batch_size)):
            if cfg.max_batches is not None and batch_idx >= cfg.max_batches:
                break
            backend.refresh()
            network.zero_grad()
            try:
                loss = task.batch_loss(network, batch, cfg.bptt_window)
                ad.backward(loss)
                for tensor in tensors:
                    if tensor.grad is not None:
                        ad.check_finite(ad.Tensor(tensor.grad), "backward")
            except ad.NonFiniteException as e:
                logger.error("Aborting at epoch {} batch {}: {}".format(epoch, batch_idx, e))
                raise TrainingAbortedException(
                    "Non-finite loss at epoch {} batch {}: {}".format(epoch, batch_idx, e),
                    epoch, batch_idx)

            if cfg.grad_clip is not None:
                snulab.optim.clip_grad_norm(tensors, cfg.grad_clip)
            for (name, tensor), delta in zip(params, optimizer.deltas(tensors)):
                backend.apply(name, tensor, delta)
            network.constrain()
            backend.after_batch()

            loss_total += loss.item() * batch.weight
            weight_total += batch.weight
            logger.debug("epoch {} batch {} loss {:.6f}".format(epoch, batch_idx, loss.item()))

        backend.end_epoch(epoch)
        backend.refresh()
        valid_loss = task.validation_loss(network, cfg.batch_size)
        metric = task.metric(network)
        wall = time.perf_counter() - started if record_wall_time else 0.0
        train_loss = loss_total / weight_total if weight_total else float("nan")
        record.add(EpochRow(epoch, train_loss, valid_loss, metric, wall))
        logger.info("epoch {}/{} train {:.4f} valid {:.4f} metric {:.4f}".format(
            epoch, cfg.epochs, train_loss, valid_loss, metric))
        if epoch_callback is not None:
            epoch_callback(epoch, network, backend)

    backend.finalize()
    return network, record


def checkpoint_save(network: snulab.units.Network, path: str, seed: int = 0,
                    config_hash: str = ""):
    params = network.named_parameters()
    snulab.container.write_container(
        path,
        CHECKPOINT_CONTAINER_KIND,
        dict(
            network=network.spec.to_dict(),
            parameters=[dict(name=name, shape=list(tensor.shape)) for name, tensor in params],
            seed=seed,
            config_hash=config_hash,
        ),
        [snulab.container.Block(name, tensor.data) for name, tensor in params],
    )


def checkpoint_load(path: str,
                    spec: typing.Optional[snulab.units.NetworkSpec] = None) -> snulab.units.Network:
    """Rebuild the network stored in ``path``; with ``spec`` the stored tensors must fit it."""
    header, arrays = snulab.container.read_container(path, CHECKPOINT_CONTAINER_KIND)
    if spec is None:
        try:
            spec = snulab.units.NetworkSpec.parse(header["network"])
        except (KeyError, snulab.units.NetworkSpecException) as e:
            raise snulab.container.ContainerException("Corrupted network in {}: {}".format(
                path, e))

    network = spec.build(np.random.default_rng(0))
    loaded = []
    for name, tensor in network.named_parameters():
        if name not in arrays:
            raise snulab.container.ContainerException("{} has no tensor for {}".format(path, name))
        if arrays[name].shape != tensor.shape:
            raise snulab.container.ContainerException(
                "Layer {} expects {}, {} holds {}".format(
                    name, tensor.shape, path, arrays[name].shape))
        loaded.append((tensor, arrays[name]))

    for tensor, array in loaded:
        tensor.data[...] = array
    logger.info("Loaded checkpoint {} ({} tensors)".format(path, len(loaded)))
    return network
