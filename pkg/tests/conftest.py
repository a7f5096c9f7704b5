import gzip
import json
import os
import struct

import numpy as np
import pytest


ROOT = os.path.realpath(os.path.join(os.path.dirname(__file__), ".."))
CONFIG_DIR = os.path.join(ROOT, "configs")


def write_idx(path, magic, array, compress=False):
    array = np.asarray(array, dtype=np.uint8)
    content = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + \
        array.tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(content)


def striped_images(count, classes=3, side=4):
    """Class c lights up row c; labels cycle through the classes."""
    labels = np.arange(count) % classes
    images = np.zeros((count, side, side), dtype=np.uint8)
    for i, label in enumerate(labels):
        images[i, label] = 255
    return images, labels


@pytest.fixture
def mnist_files(tmp_path):
    paths = dict()
    for split, count in (("train", 24), ("test", 9)):
        images, labels = striped_images(count)
        paths[split + "_images"] = str(tmp_path / "{}-images.gz".format(split))
        paths[split + "_labels"] = str(tmp_path / "{}-labels.gz".format(split))
        write_idx(paths[split + "_images"], 2051, images, compress=True)
        write_idx(paths[split + "_labels"], 2049, labels, compress=True)
    return paths


@pytest.fixture
def toy_rolls_path():
    return os.path.join(CONFIG_DIR, "toy_rolls.json")


@pytest.fixture
def classify_config(tmp_path, mnist_files):
    raw = dict(
        network=dict(input_shape=[16], layers=[
            dict(kind="snu", units=8),
            dict(kind="snu", units=3),
        ]),
        data=dict(task="classify", n_s=5, n_p=3, **mnist_files),
        train=dict(optimizer="adam", lr=0.01, batch_size=4, epochs=2, seed=3),
        output=dict(dir=str(tmp_path / "run")),
    )
    path = tmp_path / "classify.json"
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture
def sequence_config(tmp_path, toy_rolls_path):
    raw = dict(
        network=dict(input_shape=[12], layers=[
            dict(kind="snu", units=10),
            dict(kind="dense_sigmoid", units=12),
        ]),
        data=dict(task="sequence", pianoroll=toy_rolls_path),
        train=dict(optimizer="sgd", lr=0.05, batch_size=2, epochs=2, seed=1),
        output=dict(dir=str(tmp_path / "run")),
    )
    path = tmp_path / "sequence.json"
    path.write_text(json.dumps(raw))
    return str(path)
