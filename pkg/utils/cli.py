"""
Command-line interface

Sub-commands:
    run            run a federated experiment from a TOML config
    bench-filter   construction/query timing, space and FPR of the filters
    verify-bound   Monte Carlo check of the mask-mean estimation error bound
    export-png     write the fingerprint array of an update file as a PNG
    gen-data       write the synthetic datasets and client shards as CSV

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

import argparse
import logging
import os
import sys
import time
from typing import List, Optional

import numpy as np

from utils.aggregation import load_checkpoint, save_checkpoint, verify_error_bound
from utils.codec import EncodedUpdate, fingerprint_payload, read_update
from utils.config import DEFAULT_OUTPUT_DIR, ENV_LOG_LEVEL, ENV_OUTPUT_DIR, load_config
from utils.data_processor import DataProcessor
from utils.errors import ConfigError, DeltaMaskError, MalformedHeader, WireFormatError
from utils.export_handler import ExportHandler
from utils.filters import SUPPORTED_ARITY, SUPPORTED_BPE, build_filter, contains
from utils.simulator import federated_data, run_experiment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    common.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    common.add_argument('-o', '--output-dir', default=None,
                        help=f'output directory (default: ${ENV_OUTPUT_DIR} or ./{DEFAULT_OUTPUT_DIR})')

    parser = argparse.ArgumentParser(prog='deltamask_sim',
                                     description='Federated mask fine-tuning simulator with filter-coded mask deltas')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', parents=[common], help='run an experiment')
    run.add_argument('-c', '--config', default=None, help='TOML experiment config')
    run.add_argument('overrides', nargs='*', metavar='KEY=VALUE', help='config overrides')
    run.add_argument('--dry-run', action='store_true', help='print the resolved config and exit')
    run.add_argument('--check-bound', action='store_true', help='Monte Carlo error-bound check every round')
    run.add_argument('--resume', default=None, metavar='CHECKPOINT', help='continue from a checkpoint.dmg')
    run.add_argument('--xlsx', action='store_true', help='also write metrics.xlsx')
    run.add_argument('--save-updates', action='store_true', help='keep the last round\'s client uploads')
    run.add_argument('--plot', action='store_true', help='write accuracy.html and bitrate.html charts')

    bench = sub.add_parser('bench-filter', parents=[common], help='benchmark filter construction and queries')
    bench.add_argument('-n', '--keys', type=int, default=100_000)
    bench.add_argument('--bpe', type=int, nargs='+', default=[8], choices=SUPPORTED_BPE)
    bench.add_argument('--arity', type=int, default=4, choices=SUPPORTED_ARITY)
    bench.add_argument('--layout', choices=['fuse', 'xor', 'both'], default='fuse')
    bench.add_argument('-r', '--repetitions', type=int, default=3)
    bench.add_argument('--probes', type=int, default=1_000_000, help='non-member queries for the FPR')
    bench.add_argument('--seed', type=int, default=0)
    bench.add_argument('--csv', action='store_true', help='write bench_filter.csv to the output dir')

    bound = sub.add_parser('verify-bound', parents=[common], help='check E||mean error||^2 <= d/4K')
    bound.add_argument('-d', '--dim', type=int, default=1000)
    bound.add_argument('-k', '--clients', type=int, default=10)
    bound.add_argument('-t', '--trials', type=int, default=10_000)
    bound.add_argument('--bpe', type=int, default=None, choices=SUPPORTED_BPE,
                       help='add the 2^-bpe false-positive bit-flip channel')
    bound.add_argument('--theta', default='random', help="'random' or a constant probability")
    bound.add_argument('--seed', type=int, default=0)

    png = sub.add_parser('export-png', parents=[common], help='export an update as a grayscale PNG')
    png.add_argument('update', help='serialized DMU1 update file')
    png.add_argument('--png', default=None, help='output PNG path (default: <update>.png)')

    gen = sub.add_parser('gen-data', parents=[common], help='write datasets and shards as CSV')
    gen.add_argument('-c', '--config', default=None, help='TOML experiment config')
    gen.add_argument('overrides', nargs='*', metavar='KEY=VALUE', help='config overrides')

    return parser


def log_level(args) -> int:
    if getattr(args, 'verbose', False):
        return logging.DEBUG
    if getattr(args, 'quiet', False):
        return logging.WARNING
    name = os.getenv(ENV_LOG_LEVEL, 'INFO').upper()
    return getattr(logging, name, logging.INFO)


def _load_config(args):
    config = load_config(args.config, getattr(args, 'overrides', None) or [])
    if args.output_dir:
        config.run.output_dir = args.output_dir
    return config


def resolve_output_dir(args) -> str:
    """Directory the command writes to (and where the log file goes)"""
    if args.command in ('run', 'gen-data'):
        try:
            return _load_config(args).run.output_dir
        except DeltaMaskError:
            pass
    return args.output_dir or os.getenv(ENV_OUTPUT_DIR, DEFAULT_OUTPUT_DIR)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    config = _load_config(args)
    if args.check_bound:
        config.protocol.check_bound = True
    if args.dry_run:
        print(config.to_toml())
        return EXIT_OK

    resume = None
    if args.resume:
        with open(args.resume, 'rb') as f:
            resume = load_checkpoint(f.read())

    out = config.run.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, 'resolved_config.toml'), 'w') as f:
        f.write(config.to_toml())

    result = run_experiment(config, resume=resume)
    df = DataProcessor.metrics_frame(result.metrics)
    ExportHandler.export_frame(df, os.path.join(out, 'metrics.csv'), 'CSV')
    ExportHandler.export_frame(DataProcessor.client_frame(result.metrics), os.path.join(out, 'clients.csv'), 'CSV')
    if args.xlsx:
        ExportHandler.export_frame(df, os.path.join(out, 'metrics.xlsx'), 'Excel')
    if args.plot:
        charts = {'accuracy.html': DataProcessor.create_accuracy_chart(df),
                  'bitrate.html': DataProcessor.create_bitrate_chart(df)}
        for name, fig in charts.items():
            if fig is not None:
                ExportHandler.export_chart(fig, os.path.join(out, name))
    ExportHandler.export_json(DataProcessor.summarize_run(df, result.summary), os.path.join(out, 'summary.json'))
    ExportHandler.export_bytes(save_checkpoint(result.state.global_state), os.path.join(out, 'checkpoint.dmg'))
    if args.save_updates and result.metrics:
        t = result.metrics[-1].round
        for client, wire in result.last_uploads.items():
            ExportHandler.export_bytes(wire, os.path.join(out, 'updates', f'round{t:04d}_client{client:03d}.dmu'))

    summary = result.summary
    print(f"final accuracy {summary['final_accuracy']:.4f} (probe {summary['probe_accuracy']:.4f}), "
          f"avg bpp {summary['avg_bpp']:.4f}, total {summary['total_bytes']} bytes, "
          f"relative volume {summary['relative_volume']:.5f}")
    logger.info(f"Results written to {out}")
    return EXIT_OK


def _bench_one(keys, layout, bpe, arity, repetitions, probes) -> dict:
    times = []
    built = None
    for rep in range(repetitions):
        start = time.perf_counter()
        built = build_filter(keys, bpe, arity, seed=rep, layout=layout)
        times.append(time.perf_counter() - start)

    start = time.perf_counter()
    members = contains(built, keys)
    query_time = (time.perf_counter() - start) / keys.size

    return {
        'layout': layout,
        'bits_per_entry': bpe,
        'arity': built.params.arity,
        'keys': int(keys.size),
        'construct_s': float(np.median(times)),
        'construct_ns_per_key': float(np.median(times)) / keys.size * 1e9,
        'query_ns': query_time * 1e9,
        'bits_per_key': built.bits_per_key,
        'false_negatives': int(keys.size - members.sum()),
        'fpr': float(contains(built, probes).mean()) if probes.size else float('nan'),
        'expected_fpr': 2.0 ** -bpe,
    }


def cmd_bench_filter(args) -> int:
    if args.keys < 1:
        raise ConfigError('--keys must be at least 1', key='keys')
    if args.repetitions < 1:
        raise ConfigError('--repetitions must be at least 1', key='repetitions')
    if args.probes < 0:
        raise ConfigError('--probes cannot be negative', key='probes')

    rng = np.random.default_rng(args.seed)
    keys = np.unique(rng.integers(0, np.iinfo(np.int64).max, size=args.keys, dtype=np.int64)).astype(np.uint64)
    probes = rng.integers(0, np.iinfo(np.int64).max, size=args.probes, dtype=np.int64).astype(np.uint64)
    probes = probes[~np.isin(probes, keys)]

    layouts = ['fuse', 'xor'] if args.layout == 'both' else [args.layout]
    rows = [_bench_one(keys, layout, bpe, args.arity, args.repetitions, probes)
            for layout in layouts for bpe in args.bpe]
    df = DataProcessor.bench_frame(rows)
    print(df.to_string(index=False))
    if args.csv:
        path = ExportHandler.export_frame(df, os.path.join(resolve_output_dir(args), 'bench_filter.csv'))
        logger.info(f"Benchmark table written to {path}")
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    if args.trials < 1:
        raise ConfigError('--trials must be at least 1', key='trials')
    if args.dim < 1 or args.clients < 1:
        raise ConfigError('--dim and --clients must be at least 1', key='dim')

    rng = np.random.default_rng(args.seed)
    if args.theta == 'random':
        theta = rng.random((args.clients, args.dim))
    else:
        try:
            value = float(args.theta)
        except ValueError:
            raise ConfigError(f"--theta must be 'random' or a number, got '{args.theta}'", key='theta')
        if not 0.0 <= value <= 1.0:
            raise ConfigError('--theta must lie in [0, 1]', key='theta')
        theta = np.full((args.clients, args.dim), value)

    report = verify_error_bound(theta, args.trials, args.bpe, seed=args.seed + 1)
    print(f"empirical {report.empirical:.4f}  bound d/4K {report.bound:.4f}  "
          f"tolerance {report.tolerance:.4f}  trials {report.trials}  "
          f"{'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK


def cmd_export_png(args) -> int:
    with open(args.update, 'rb') as f:
        update = read_update(f.read())
    if not isinstance(update, EncodedUpdate):
        raise MalformedHeader(f"{args.update} is a dense update, it holds no fingerprints")
    payload = fingerprint_payload(update)
    path = args.png or os.path.splitext(args.update)[0] + '.png'
    ExportHandler.export_png(payload, path)
    if ExportHandler.import_png(path) != payload:
        raise RuntimeError(f"PNG round trip of {path} changed the fingerprint bytes")
    width, height = ExportHandler.png_shape(len(payload))
    print(f"{path}: {width}x{height}, {len(payload)} fingerprint bytes")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    train, test, shards = federated_data(config)

    out = config.run.output_dir
    ExportHandler.export_frame(DataProcessor.dataset_frame(train), os.path.join(out, 'train.csv'))
    ExportHandler.export_frame(DataProcessor.dataset_frame(test), os.path.join(out, 'test.csv'))
    ExportHandler.export_frame(DataProcessor.shard_frame(shards), os.path.join(out, 'shards.csv'))
    print(f"Wrote {train.sample_count} train, {test.sample_count} test samples "
          f"and {len(shards)} shards to {out}")
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'bench-filter': cmd_bench_filter,
    'verify-bound': cmd_verify_bound,
    'export-png': cmd_export_png,
    'gen-data': cmd_gen_data,
}


def dispatch(args) -> int:
    """Run a parsed command and map failures to exit codes"""
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        where = f" (key '{e.key}')" if e.key else ''
        logger.error(f"Configuration error{where}: {str(e)}")
        return EXIT_USAGE
    except WireFormatError as e:
        logger.error(f"Malformed input: {str(e)}")
        return EXIT_USAGE
    except FileNotFoundError as e:
        logger.error(f"File not found: {str(e)}")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {str(e)}")
        logger.debug('Traceback', exc_info=True)
        return EXIT_RUNTIME


def configure_logging(args):
    handlers = [logging.StreamHandler()]
    # dry runs log to the console only
    if not getattr(args, 'dry_run', False):
        output_dir = resolve_output_dir(args)
        try:
            os.makedirs(output_dir, exist_ok=True)
            handlers.append(logging.FileHandler(os.path.join(output_dir, 'deltamask.log')))
        except OSError as e:
            print(f"Cannot write log file in {output_dir}: {str(e)}", file=sys.stderr)

    # Configure logging with more details
    logging.basicConfig(
        level=log_level(args),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args)
    logger.debug(f"Command line: {' '.join(sys.argv[1:] if argv is None else argv)}")
    return dispatch(args)


if __name__ == '__main__':
    sys.exit(main())
