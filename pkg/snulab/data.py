import gzip
import json
import logging
import struct
import typing

import numpy as np

import snulab.autodiff
import snulab.container


logger = logging.getLogger(__name__)


IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
DEFAULT_PRESENTATION_STEPS = 20
DEFAULT_PAUSE_STEPS = 20
DEFAULT_PITCH_LO = 21
DEFAULT_PITCH_HI = 108
PIANOROLL_SPLITS = ("train", "valid", "test")
STREAM_CONTAINER_KIND = "spike_stream"
NO_LABEL = -1


class DatasetFormatException(Exception):

    def __init__(self, message):
        super().__init__(message)


class DatasetLengthException(DatasetFormatException):

    def __init__(self, message):
        super().__init__(message)


class DatasetDomainException(Exception):

    def __init__(self, message):
        super().__init__(message)


class Segment(object):

    __slots__ = ("start", "end", "labels")
    start: int
    end: int
    labels: typing.Tuple[int, ...]

    def __init__(self, start, end, labels=()):
        self.start = start
        self.end = end
        self.labels = tuple(labels)

    def to_dict(self) -> dict:
        return dict(start=self.start, end=self.end, labels=list(self.labels))

    @classmethod
    def parse(cls, raw: dict):
        return cls(int(raw["start"]), int(raw["end"]), [int(label) for label in raw["labels"]])

    def __eq__(self, other) -> bool:
        return isinstance(other, Segment) and \
            (self.start, self.end, self.labels) == (other.start, other.end, other.labels)

    def __repr__(self) -> str:  # pragma: no cover
        return "Segment({}, {}, {})".format(self.start, self.end, self.labels)


class SpikeStream(object):
    """Time-major binary spikes, [time x lanes x features...], plus presentation windows."""

    __slots__ = ("data", "segments", "n_s", "n_p")
    data: np.ndarray
    segments: typing.List[Segment]
    n_s: int
    n_p: int

    def __init__(self, data, segments, n_s, n_p):
        data = np.asarray(data)
        if data.ndim < 3:
            raise snulab.autodiff.DimensionException(
                "SpikeStream data must be [time x lanes x features], got {}".format(data.shape))
        if not np.all((data == 0) | (data == 1)):
            raise DatasetDomainException("SpikeStream data must be binary")

        previous_end = 0
        for segment in segments:
            if segment.start < previous_end or segment.end < segment.start \
                    or segment.end > data.shape[0]:
                raise snulab.autodiff.ContractException(
                    "Segment [{}, {}) is not ordered within a stream of {} steps".format(
                        segment.start, segment.end, data.shape[0]))
            previous_end = segment.end

        self.data = data.astype(np.uint8)
        self.segments = list(segments)
        self.n_s = n_s
        self.n_p = n_p

    @property
    def time(self) -> int:
        return self.data.shape[0]

    @property
    def lanes(self) -> int:
        return self.data.shape[1]

    def step(self, t: int) -> np.ndarray:
        return self.data[t].astype(np.float64)


def _open(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: str, magic: int, dims: int) -> typing.Tuple[typing.Tuple[int, ...], bytes]:
    with _open(path) as f:
        content = f.read()

    header_size = 4 + 4 * dims
    if len(content) < 4:
        raise DatasetLengthException("{} is too short for an IDX header".format(path))
    (observed,) = struct.unpack(">I", content[:4])
    if observed != magic:
        raise DatasetFormatException("{} has magic {}, expected {}".format(path, observed, magic))
    if len(content) < header_size:
        raise DatasetLengthException("{} is too short for an IDX header".format(path))

    extents = struct.unpack(">" + "I" * dims, content[4:header_size])
    expected = int(np.prod(extents, dtype=np.int64))
    payload = content[header_size:]
    if len(payload) < expected:
        raise DatasetLengthException("{} holds {} bytes of data, header announces {}".format(
            path, len(payload), expected))

    return extents, payload[:expected]


def load_mnist(images_path: str, labels_path: str) -> typing.Tuple[np.ndarray, typing.List[int]]:
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (label_count,), raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != label_count:
        raise DatasetFormatException("{} images but {} labels".format(count, label_count))

    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows, cols) / 255.0
    labels = [int(label) for label in np.frombuffer(raw_labels, dtype=np.uint8)]
    logger.info("Loaded {} images of {}x{} from {}".format(count, rows, cols, images_path))
    return images, labels


def _seed_entropy(rng_seed) -> typing.List[int]:
    if isinstance(rng_seed, (list, tuple)):
        return [int(part) for part in rng_seed]
    return [int(rng_seed)]


def rate_encode(images: np.ndarray,
                n_s: int = DEFAULT_PRESENTATION_STEPS,
                n_p: int = DEFAULT_PAUSE_STEPS,
                rng_seed=0,
                labels: typing.Optional[typing.Sequence[int]] = None,
                lanes: int = 1,
                sample_ids: typing.Optional[typing.Sequence[int]] = None) -> SpikeStream:
    """Bernoulli rate coding with n_s presentation steps and n_p silent steps per image.

    Image i lands in lane ``i % lanes`` and slot ``i // lanes``; images in one
    lane follow each other with no gap when n_p is 0. Each image draws from its
    own generator keyed by (seed, sample id), so encodings do not depend on
    batch composition.
    """
    images = np.asarray(images, dtype=np.float64)
    count = images.shape[0]
    features = images.shape[1:]
    if np.any(images < 0.0) or np.any(images > 1.0):
        raise DatasetDomainException("Pixel intensities must lie in [0, 1]")
    if n_s < 1 or n_p < 0 or lanes < 1:
        raise snulab.autodiff.ContractException(
            "Invalid encoding extents n_s={} n_p={} lanes={}".format(n_s, n_p, lanes))
    if sample_ids is None:
        sample_ids = range(count)

    slots = max((count + lanes - 1) // lanes, 1)
    period = n_s + n_p
    data = np.zeros((slots * period, lanes) + features, dtype=np.uint8)
    slot_labels = np.full((slots, lanes), NO_LABEL, dtype=np.int64)
    entropy = _seed_entropy(rng_seed)

    for i in range(count):
        slot, lane = divmod(i, lanes)
        rng = np.random.default_rng(entropy + [int(sample_ids[i])])
        draws = rng.random((n_s,) + features)
        start = slot * period
        data[start:start + n_s, lane] = draws < images[i]
        if labels is not None:
            slot_labels[slot, lane] = int(labels[i])

    segments = [Segment(slot * period, slot * period + n_s, slot_labels[slot].tolist())
                for slot in range(slots)]
    return SpikeStream(data, segments, n_s, n_p)


def readout_counts(output, segment: Segment, lane: int = 0) -> int:
    data = output.data if isinstance(output, SpikeStream) else np.asarray(output)
    if segment.end <= segment.start:
        raise snulab.autodiff.ContractException(
            "Empty readout segment [{}, {})".format(segment.start, segment.end))
    if segment.start < 0 or segment.end > data.shape[0]:
        raise snulab.autodiff.ContractException(
            "Segment [{}, {}) outside a stream of {} steps".format(
                segment.start, segment.end, data.shape[0]))

    counts = data[segment.start:segment.end, lane].reshape(segment.end - segment.start, -1)
    return int(np.argmax(counts.sum(axis=0)))


def save_stream(stream: SpikeStream, path: str, seed=0):
    snulab.container.write_container(
        path,
        STREAM_CONTAINER_KIND,
        dict(
            shape=list(stream.data.shape),
            seed=_seed_entropy(seed),
            n_s=stream.n_s,
            n_p=stream.n_p,
            segments=[segment.to_dict() for segment in stream.segments],
        ),
        [snulab.container.Block("spikes", stream.data, snulab.container.ENCODING_BITS)],
    )


def load_stream(path: str) -> SpikeStream:
    header, arrays = snulab.container.read_container(path, STREAM_CONTAINER_KIND)
    try:
        segments = [Segment.parse(raw) for raw in header["segments"]]
        return SpikeStream(arrays["spikes"], segments, int(header["n_s"]), int(header["n_p"]))
    except (KeyError, TypeError, ValueError):
        raise snulab.container.ContainerException("Corrupted stream header in {}".format(path))


class PianoRollDataset(object):

    __slots__ = ("sequences", "pitch_lo", "pitch_hi")
    sequences: typing.Dict[str, typing.List[typing.List[typing.FrozenSet[int]]]]
    pitch_lo: int
    pitch_hi: int

    def __init__(self, sequences, pitch_lo=DEFAULT_PITCH_LO, pitch_hi=DEFAULT_PITCH_HI):
        self.sequences = sequences
        self.pitch_lo = pitch_lo
        self.pitch_hi = pitch_hi

    @property
    def features(self) -> int:
        return self.pitch_hi - self.pitch_lo + 1

    def split(self, name: str):
        if name not in self.sequences:
            raise DatasetFormatException("Piano roll has no {} split".format(name))
        return self.sequences[name]

    @classmethod
    def parse(cls, raw, source="<memory>"):
        if not isinstance(raw, dict) or "splits" not in raw or not isinstance(raw["splits"], dict):
            raise DatasetFormatException("{} is not a piano-roll document".format(source))

        pitch_lo = raw.get("pitch_lo", DEFAULT_PITCH_LO)
        pitch_hi = raw.get("pitch_hi", DEFAULT_PITCH_HI)
        if not isinstance(pitch_lo, int) or not isinstance(pitch_hi, int) or pitch_hi < pitch_lo:
            raise DatasetFormatException("{} has an invalid pitch range".format(source))

        sequences = dict()
        for split, split_sequences in raw["splits"].items():
            if split not in PIANOROLL_SPLITS or not isinstance(split_sequences, list):
                raise DatasetFormatException("{} has an invalid split {}".format(source, split))
            parsed = []
            for seq_idx, sequence in enumerate(split_sequences):
                if not isinstance(sequence, list):
                    raise DatasetFormatException("{} {} sequence {} is not a list".format(
                        source, split, seq_idx))
                steps = []
                for step_idx, chord in enumerate(sequence):
                    if not isinstance(chord, list) or \
                            not all(isinstance(p, int) and not isinstance(p, bool) for p in chord):
                        raise DatasetFormatException(
                            "{} {} sequence {} step {} is not a list of pitches".format(
                                source, split, seq_idx, step_idx))
                    for pitch in chord:
                        if pitch < pitch_lo or pitch > pitch_hi:
                            raise DatasetDomainException(
                                "Pitch {} outside [{}, {}] in {} sequence {} step {}".format(
                                    pitch, pitch_lo, pitch_hi, split, seq_idx, step_idx))
                    steps.append(frozenset(chord))
                parsed.append(steps)
            sequences[split] = parsed

        return cls(sequences, pitch_lo, pitch_hi)


def pianoroll_load(path: str) -> PianoRollDataset:
    with open(path, "r") as f:
        try:
            raw = json.load(f)
        except ValueError:
            raise DatasetFormatException("{} is not valid JSON".format(path))

    dataset = PianoRollDataset.parse(raw, source=path)
    logger.info("Loaded piano roll {} with splits {}".format(
        path, ", ".join("{}={}".format(k, len(v)) for k, v in sorted(dataset.sequences.items()))))
    return dataset


def pianoroll_vectorize(dataset: PianoRollDataset, split: str = "train") -> typing.List[np.ndarray]:
    rolls = []
    for sequence in dataset.split(split):
        roll = np.zeros((len(sequence), dataset.features))
        for step, chord in enumerate(sequence):
            for pitch in chord:
                roll[step, pitch - dataset.pitch_lo] = 1.0
        rolls.append(roll)
    return rolls


def pianoroll_devectorize(roll: np.ndarray,
                          pitch_lo: int = DEFAULT_PITCH_LO) -> typing.List[typing.FrozenSet[int]]:
    return [frozenset(int(idx) + pitch_lo for idx in np.flatnonzero(row)) for row in roll]


def next_step_pairs(roll: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Inputs are frames 0..T-2, targets the frames one step later."""
    return roll[:-1], roll[1:]
