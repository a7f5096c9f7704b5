"""Full-scale runs of the bundled configs against their target numbers.

Each run takes minutes to an hour, so they are marked slow and need the
datasets: SNULAB_JSB (piano-roll JSON) and SNULAB_MNIST_DIR (IDX files).
"""
import json
import os

import pytest

import snulab.main
import snulab.training
from tests.conftest import CONFIG_DIR


JSB_TARGET_NLL = 9.6
PCM_GAP = 0.6
MNIST_TARGET_ACCURACY = 0.90
STREAM_ACCURACY_DROP = 0.02

needs_jsb = pytest.mark.skipif(not os.environ.get("SNULAB_JSB"), reason="SNULAB_JSB not set")
needs_mnist = pytest.mark.skipif(not os.environ.get("SNULAB_MNIST_DIR"),
                                 reason="SNULAB_MNIST_DIR not set")


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr("snulab.main.init_logging", lambda verbose=False: None)


def _bundled(tmp_path, name):
    """Copy a bundled config with its data paths pointed at the local datasets."""
    with open(os.path.join(CONFIG_DIR, name)) as f:
        raw = json.load(f)
    data = raw["data"]
    if data["task"] == "sequence":
        data["pianoroll"] = os.environ["SNULAB_JSB"]
    else:
        directory = os.environ["SNULAB_MNIST_DIR"]
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            data[key] = os.path.join(directory, os.path.basename(data[key]))
    raw["output"]["dir"] = str(tmp_path / name.replace(".json", ""))
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path), raw["output"]["dir"]


def _train(tmp_path, name):
    path, out = _bundled(tmp_path, name)
    assert snulab.main.main(["train", "--config", path, "--seed", "0"]) == 0
    return path, out, snulab.training.RunRecord.read_csv(os.path.join(out, "curve.csv"))


def _accuracy(capsys, path, out, mode):
    capsys.readouterr()
    assert snulab.main.main(["eval", "--config", path, "--mode", mode,
                             "--checkpoint", os.path.join(out, "model.ckpt")]) == 0
    words = capsys.readouterr().out.split()
    assert words[:2] == [mode, "accuracy"]
    return float(words[2])


@pytest.mark.slow
@needs_jsb
def test_jsb_reaches_target_loss(tmp_path):
    _, _, record = _train(tmp_path, "jsb.json")

    assert record.final.metric <= JSB_TARGET_NLL


@pytest.mark.slow
@needs_jsb
def test_pcm_backend_stays_close_to_ideal(tmp_path):
    _, _, ideal = _train(tmp_path, "jsb.json")
    _, out, pcm = _train(tmp_path, "jsb_pcm.json")

    assert pcm.final.metric - ideal.final.metric <= PCM_GAP
    assert os.path.exists(os.path.join(out, "crossbar_0.pcm"))


@pytest.mark.slow
@needs_jsb
@pytest.mark.parametrize("name", ["jsb_gru.json", "jsb_lstm.json"])
def test_recurrent_baseline_on_jsb(tmp_path, name):
    _, _, record = _train(tmp_path, name)

    assert record.final.metric <= JSB_TARGET_NLL


@pytest.mark.slow
@needs_mnist
def test_mnist_accuracy_and_continuous_stream(tmp_path, capsys):
    path, out, record = _train(tmp_path, "mnist.json")

    paused = _accuracy(capsys, path, out, "classify")
    stream = _accuracy(capsys, path, out, "classify-stream")

    assert record.final.metric >= MNIST_TARGET_ACCURACY
    assert paused >= MNIST_TARGET_ACCURACY
    assert paused - stream <= STREAM_ACCURACY_DROP
