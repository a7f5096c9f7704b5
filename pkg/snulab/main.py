import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

import snulab.autodiff as ad
import snulab.checks
import snulab.config
import snulab.container
import snulab.data
import snulab.pcm
import snulab.training
import snulab.units


logger = logging.getLogger(__name__)


EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_ABORTED = 3

RUN_CONFIG_FILE = "run.json"
CURVE_FILE = "curve.csv"
CHECKPOINT_FILE = "model.ckpt"

# everything a user can cause with a bad config, path or data file
USER_ERRORS = (
    snulab.config.ConfigException,
    snulab.units.NetworkSpecException,
    snulab.units.LifConfigException,
    snulab.data.DatasetFormatException,
    snulab.data.DatasetDomainException,
    snulab.container.ContainerException,
    snulab.pcm.CrossbarConfigException,
    ad.DimensionException,
    ad.DomainException,
    OSError,
)


def init_logging(verbose=False):
    level = logging.DEBUG if verbose else logging.INFO
    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    ch = logging.StreamHandler()
    ch.setLevel(level)

    formatter = logging.Formatter(
        "{asctime} - {levelname:>8} - {name} - {message}", style="{")

    ch.setFormatter(formatter)

    root_logger.addHandler(ch)


def _load_config(args) -> snulab.config.RunConfigFile:
    config = snulab.config.RunConfigFile.load(args.config)
    config.apply_overrides(seed=args.seed, out=getattr(args, "out", None),
                           backend=getattr(args, "backend", None))
    return config


def make_backend(config: snulab.config.RunConfigFile, network: snulab.units.Network):
    if config.backend.kind == "pcm":
        return snulab.pcm.hwloop_adapter(
            network,
            config.backend.device,
            seed=config.train.seed,
            rebalance_every=config.backend.rebalance_every,
            batch_seconds=config.backend.batch_seconds,
        )
    return snulab.pcm.IdealBackend().attach(network)


def histogram_writer(config: snulab.config.RunConfigFile):
    directory = config.output.dir
    bins = config.output.histogram_bins

    def write(epoch, network, backend):
        crossbars = backend.crossbars()
        if not crossbars and not config.output.histograms:
            return
        for name, tensor in network.weight_parameters():
            weights = crossbars[name].effective_weights() if name in crossbars else tensor.data
            path = os.path.join(directory, "hist_{}_{}.csv".format(
                snulab.pcm.layer_label(name), epoch))
            snulab.pcm.write_histogram(path, weights, bins)

    return write


def cmd_train(args) -> int:
    config = _load_config(args)
    task = snulab.training.build_task(config.data, config.train)
    network = config.network.build(np.random.default_rng(config.train.seed))

    out_dir = config.output.dir
    os.makedirs(out_dir, exist_ok=True)
    config.write(os.path.join(out_dir, RUN_CONFIG_FILE))
    fingerprint = config.fingerprint()
    logger.info("Config fingerprint {} seed {}".format(fingerprint[:12], config.train.seed))

    backend = make_backend(config, network)
    try:
        network, record = snulab.training.bptt_train(
            network,
            task,
            config.train,
            backend=backend,
            record_wall_time=config.output.record_wall_time,
            config_hash=fingerprint,
            epoch_callback=histogram_writer(config),
        )
    finally:
        if config.backend.kind == "pcm":
            backend.save(out_dir)

    record.write_csv(os.path.join(out_dir, CURVE_FILE))
    snulab.training.checkpoint_save(network, os.path.join(out_dir, CHECKPOINT_FILE),
                                    seed=config.train.seed, config_hash=fingerprint)
    final = record.final
    print("final epoch {} valid_loss {:.6f} metric {:.6f}".format(
        final.epoch, final.valid_loss, final.metric))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    network = snulab.training.checkpoint_load(args.checkpoint)
    data = config.data

    if args.mode == "sequence":
        if data.task != snulab.config.TASK_SEQUENCE:
            raise snulab.config.ConfigException("sequence mode needs a piano-roll data section")
        task = snulab.training.build_task(data, config.train)
        snulab.training.check_input(network, task.frame_shape)
        nll = snulab.training.evaluate_sequence(network, task.test_rolls, task.loss_kind)
        print("mean frame NLL {:.4f}".format(nll))
        return EXIT_OK

    if data.task != snulab.config.TASK_CLASSIFY:
        raise snulab.config.ConfigException("{} mode needs an image data section".format(
            args.mode))
    n_p = 0 if args.mode == "classify-stream" else data.n_p

    if args.stream:
        stream = snulab.data.load_stream(args.stream)
        snulab.training.check_input(network, stream.data.shape[2:])
        accuracy = snulab.training.evaluate_classification(network, stream)
    else:
        images, labels = snulab.data.load_mnist(data.test_images, data.test_labels)
        if data.test_limit:
            images, labels = images[:data.test_limit], labels[:data.test_limit]
        snulab.training.check_input(network, images.shape[1:])
        accuracy = snulab.training.evaluate_images(
            network, images, labels, data.n_s, n_p,
            [config.train.seed, snulab.training.TEST_STREAM_KEY])
    print("{} accuracy {:.4f}".format(args.mode, accuracy))
    return EXIT_OK


def cmd_check(args) -> int:
    config = _load_config(args)
    seed = config.train.seed
    if args.kind == "gradcheck":
        result = snulab.checks.gradcheck(config, seed)
    elif args.kind == "lifcheck":
        result = snulab.checks.lifcheck(config.check, seed)
    else:
        result = snulab.checks.paramcount(config.network)

    for line in result.lines:
        print(line)
    if not result.passed:
        logger.error("{} failed".format(result.name))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_encode(args) -> int:
    config = _load_config(args)
    data = config.data
    if data.task != snulab.config.TASK_CLASSIFY:
        raise snulab.config.ConfigException("Only image data can be rate encoded")

    if args.split == "train":
        images, labels = snulab.data.load_mnist(data.train_images, data.train_labels)
        limit = data.train_limit
    else:
        images, labels = snulab.data.load_mnist(data.test_images, data.test_labels)
        limit = data.test_limit
    if limit:
        images, labels = images[:limit], labels[:limit]

    n_p = 0 if args.continuous else data.n_p
    seed = [config.train.seed, snulab.training.TEST_STREAM_KEY]
    stream = snulab.data.rate_encode(images, data.n_s, n_p, seed, labels=labels)
    snulab.data.save_stream(stream, args.output, seed=seed)
    print("encoded {} images into {} steps".format(len(labels), stream.time))
    return EXIT_OK


def _read_run(run_dir: str):
    record = snulab.training.RunRecord.read_csv(os.path.join(run_dir, CURVE_FILE))
    if record.final is None:
        raise snulab.data.DatasetFormatException("{} holds no epochs".format(run_dir))
    task = snulab.config.TASK_SEQUENCE
    run_config = os.path.join(run_dir, RUN_CONFIG_FILE)
    if os.path.exists(run_config):
        with open(run_config, "r") as f:
            task = json.load(f).get("data", dict()).get("task", task)
    return record.final, task


def cmd_export(args) -> int:
    finals = []
    tasks = set()
    for run_dir in args.runs:
        final, task = _read_run(run_dir)
        finals.append((run_dir, final))
        tasks.add(task)
    if len(tasks) > 1:
        raise snulab.config.ConfigException("Runs mix classification and sequence tasks")

    metrics = np.array([final.metric for _, final in finals])
    # accuracy is maximized, frame NLL minimized
    best = metrics.max() if tasks == {snulab.config.TASK_CLASSIFY} else metrics.min()
    rows = [(run_dir, final.epoch, final.train_loss, final.valid_loss, final.metric)
            for run_dir, final in finals]

    for row in rows:
        print("{} epoch {} train {:.4f} valid {:.4f} metric {:.4f}".format(*row))
    print("best {:.4f} mean {:.4f} over {} runs".format(best, metrics.mean(), len(rows)))

    if args.output:
        with open(args.output, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(("run", "epoch", "train_loss", "valid_loss", "metric"))
            for row in rows:
                writer.writerow(row[:2] + tuple(repr(float(v)) for v in row[2:]))
            writer.writerow(("best", "", "", "", repr(float(best))))
            writer.writerow(("mean", "", "", "", repr(float(metrics.mean()))))
        logger.info("Wrote summary {}".format(args.output))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snulab",
                                     description="Spiking neural unit training and checks")
    parser.add_argument("--verbose", action="store_true", help="log per-batch details")
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(sub):
        sub.add_argument("--config", required=True, help="run configuration (JSON)")
        sub.add_argument("--seed", type=int, help="override train.seed")
        return sub

    train = with_config(commands.add_parser("train", help="train a network"))
    train.add_argument("--out", help="output directory, overrides output.dir")
    train.add_argument("--backend", choices=snulab.config.BACKENDS,
                       help="weight backend, overrides backend.kind")
    train.set_defaults(handler=cmd_train)

    evaluate = with_config(commands.add_parser("eval", help="evaluate a checkpoint"))
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--mode", required=True,
                          choices=("classify", "classify-stream", "sequence"))
    evaluate.add_argument("--stream", help="pre-encoded spike stream to classify")
    evaluate.set_defaults(handler=cmd_eval)

    check = with_config(commands.add_parser("check", help="run a correctness check"))
    check.add_argument("kind", choices=("gradcheck", "lifcheck", "paramcount"))
    check.set_defaults(handler=cmd_check)

    encode = with_config(commands.add_parser("encode", help="cache a rate-coded spike stream"))
    encode.add_argument("--split", choices=("train", "test"), default="test")
    encode.add_argument("--continuous", action="store_true", help="encode without pauses")
    encode.add_argument("--output", required=True, help="stream container to write")
    encode.set_defaults(handler=cmd_encode)

    export = commands.add_parser("export", help="summarize final epochs of several runs")
    export.add_argument("runs", nargs="+", help="run output directories")
    export.add_argument("--output", help="summary CSV to write")
    export.set_defaults(handler=cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    init_logging(args.verbose)

    try:
        return args.handler(args)
    except snulab.training.TrainingAbortedException as e:
        logger.error("Training aborted: {}".format(e))
        return EXIT_ABORTED
    except USER_ERRORS as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR
    except Exception:
        logger.exception("Unexpected failure in {}".format(args.command))
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
