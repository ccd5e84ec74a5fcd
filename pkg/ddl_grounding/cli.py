"""Command-line entry points of ddl-grounding."""

import argparse
import json
import logging
import os
import sys

from . import __version__
from .config import RunConfig, load_ini
from .dataset import load_manifest, make_synthetic_corpus
from .errors import ConfigError, DDLError, TransportError
from .evalcal import render_text
from .lvlm_client import ChatCompletionsClient
from .pipeline import (
    CONFIG_FILE,
    HISTORY_FILE,
    ArtifactWriter,
    analyze_run,
    evaluate_predictions,
    history_rows,
    make_grounder,
    read_jsonl,
    run_ddl,
    run_uncertainty_mode,
    select_prompt,
)
from .run_logging import LOG_FORMAT

log = logging.getLogger(__name__)

BEST_PROMPT_FILE = 'best_prompt.txt'


def add_shared_option(group, name, help, type=None, action='store',
                      flag=None):
    """
    Add an option that also has a ``[ddl]`` config-file key.

    The option defaults to ``None`` so that an unset flag falls back to the
    config file and then to the RunConfig default.

    :param group:  argparse parser or argument group
    :param name:   option and config key name
    :param help:   help text
    :param type:   argparse type converter
    :param action: argparse action
    :param flag:   command-line flag, ``--name-with-dashes`` by default
    """
    kwargs = {
        'dest': name,
        'default': None,
        'action': action,
        'help': '{0} (config key: {1})'.format(help, name),
    }
    if type is not None:
        kwargs['type'] = type
    group.add_argument(flag or '--' + name.replace('_', '-'), **kwargs)


def add_run_options(parser):
    """Register every RunConfig option on a subcommand parser."""
    parser.add_argument('--config', help='INI file with a [ddl] section')
    parser.add_argument('--manifest', help='Line-delimited JSON manifest')

    group = parser.add_argument_group('endpoints')
    add_shared_option(group, 'target_url', 'Grounding model base URL')
    add_shared_option(group, 'target_model', 'Grounding model name')
    add_shared_option(group, 'meta_url', 'Meta-optimizer base URL')
    add_shared_option(group, 'meta_model', 'Meta-optimizer model name')
    add_shared_option(group, 'timeout', 'Request timeout, seconds',
                      type=float)
    add_shared_option(group, 'max_retries', 'Retries per request', type=int)
    add_shared_option(group, 'max_tokens', 'Max generation tokens',
                      type=int)
    add_shared_option(group, 'normalized_range',
                      'Upper bound of normalized model coordinates, '
                      '0 for pixels', type=int)

    group = parser.add_argument_group('consensus')
    add_shared_option(group, 'm', 'Number of perturbed views', type=int,
                      flag='--views')
    add_shared_option(group, 'tau', 'Match IoU threshold', type=float)
    add_shared_option(group, 'omega1', 'Consensus weight', type=float)
    add_shared_option(group, 'omega2', 'Stability weight', type=float)
    add_shared_option(group, 'strategy',
                      'Consolidation strategy: RHC, SA, WA or DBSCAN')
    add_shared_option(group, 'eps', 'DBSCAN radius in 1-IoU', type=float)
    add_shared_option(group, 'min_pts', 'DBSCAN minimum cluster size',
                      type=int)
    add_shared_option(group, 'rotation',
                      'Rotation views: fixed (+/-3 deg) or uniform')
    add_shared_option(group, 'uncertainty',
                      'Uncertainty mode: visual or linguistic')

    group = parser.add_argument_group('run')
    add_shared_option(group, 'seed', 'Run seed', type=int)
    add_shared_option(group, 'seeds',
                      'Comma separated roster seeds to average over')
    add_shared_option(group, 'max_generations',
                      'Prompt evolution generations', type=int)
    add_shared_option(group, 'score_full_pipeline',
                      'Score candidate prompts through the full pipeline',
                      action='store_true')
    add_shared_option(group, 'workers', 'Parallel requests cap', type=int)
    add_shared_option(group, 'output_dir', 'Run artifacts directory')
    add_shared_option(group, 'log_level', 'Logging level')

    group = parser.add_argument_group('mock LVLM')
    add_shared_option(group, 'mock', 'Use the mock LVLM',
                      action='store_true')
    add_shared_option(group, 'jitter_px', 'Mock box jitter, pixels',
                      type=float)
    add_shared_option(group, 'hallucination_prob',
                      'Mock hallucination probability', type=float)
    add_shared_option(group, 'miss_prob', 'Mock miss probability',
                      type=float)
    add_shared_option(group, 'sampling_jitter_px',
                      'Extra mock jitter of sampled calls', type=float)
    add_shared_option(group, 'consistent_jitter',
                      'Share the mock jitter across views of an image',
                      action='store_true')


def build_parser():
    """Build the argparse parser of every subcommand."""
    parser = argparse.ArgumentParser(
        prog='ddl-grounding',
        description='Test-time verified abnormality grounding')
    parser.add_argument('--version', action='version',
                        version='%(prog)s {0}'.format(__version__))
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    evolve = commands.add_parser(
        'evolve', help='Evolve the instruction on the dev split')
    add_run_options(evolve)
    evolve.set_defaults(handler=cmd_evolve)

    ground = commands.add_parser(
        'ground', help='Ground, consolidate and evaluate a manifest')
    add_run_options(ground)
    ground.add_argument('--prompt-file',
                        help='Use this instruction instead of evolving one')
    ground.add_argument('--compare-uncertainty', action='store_true',
                        help='Run both visual and linguistic modes')
    ground.set_defaults(handler=cmd_ground)

    evaluate = commands.add_parser(
        'eval', help='Evaluate prediction records against a manifest')
    evaluate.add_argument('--manifest', required=True)
    evaluate.add_argument('--predictions', required=True)
    evaluate.add_argument('--baseline',
                          help='Baseline predictions for relative deltas')
    evaluate.add_argument('--output', help='Write the JSON report here')
    evaluate.set_defaults(handler=cmd_eval)

    report = commands.add_parser(
        'report', help='Calibration and prompt KDE analysis of a run')
    report.add_argument('--run-dir', required=True)
    report.add_argument('--manifest', required=True)
    report.set_defaults(handler=cmd_report)

    demo = commands.add_parser(
        'mock-demo', help='Synthetic end-to-end run with the mock LVLM')
    add_run_options(demo)
    demo.add_argument('--images', type=int, default=10,
                      help='Synthetic test images')
    demo.add_argument('--dev-images', type=int, default=4,
                      help='Synthetic dev images')
    demo.set_defaults(handler=cmd_mock_demo)
    return parser


def resolve_config(args, **overrides):
    """Resolve a RunConfig from flags, the config file and defaults."""
    ini = load_ini(args.config) if getattr(args, 'config', None) else None
    cfg = RunConfig.from_sources(args, ini, **overrides)
    logging.getLogger().setLevel(cfg.log_level.upper())
    return cfg


def _require_manifest(args):
    if not args.manifest:
        raise ConfigError('--manifest is required')
    return load_manifest(args.manifest)


def _check_endpoint(cfg):
    if cfg.mock:
        return
    try:
        ChatCompletionsClient(cfg.target_endpoint(),
                              token=cfg.api_token).check_connection()
    except TransportError as exc:
        raise ConfigError(str(exc))


def cmd_evolve(args):
    """Evolve the instruction and write ``p*`` with its history."""
    cfg = resolve_config(args)
    data = _require_manifest(args)
    _check_endpoint(cfg)
    writer = ArtifactWriter(cfg.output_dir)
    writer.write_json(CONFIG_FILE, {'config': cfg.snapshot(),
                                    'seed': cfg.run_seeds()[0],
                                    'config_hash': cfg.config_hash()})
    best, history = select_prompt(cfg, data, make_grounder(cfg, cfg.seed),
                                  seed=cfg.run_seeds()[0])
    writer.append_jsonl(HISTORY_FILE, history_rows(
        best, history, cfg.run_seeds()[0], cfg.config_hash()))
    with open(writer.path(BEST_PROMPT_FILE), 'w', encoding='utf-8') as fh:
        fh.write(best.text + '\n')
    print(best.text)
    return 0


def cmd_ground(args):
    """Run the full pipeline on a manifest."""
    cfg = resolve_config(args)
    data = _require_manifest(args)
    _check_endpoint(cfg)
    prompt = None
    if args.prompt_file:
        with open(args.prompt_file, encoding='utf-8') as fh:
            prompt = fh.read().strip()
    if args.compare_uncertainty:
        comparison = run_uncertainty_mode(cfg, data)
        print(json.dumps(comparison.summary['mean_sigma'], sort_keys=True))
        return 0
    artifacts = run_ddl(cfg, data, prompt=prompt)
    print(render_text(artifacts.report))
    return 0


def cmd_eval(args):
    """Evaluate a predictions file."""
    data = load_manifest(args.manifest)
    baseline = read_jsonl(args.baseline) if args.baseline else None
    report = evaluate_predictions(data, read_jsonl(args.predictions),
                                  baseline)
    if args.output:
        with open(args.output, 'w', encoding='utf-8') as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write('\n')
    print(render_text(report))
    return 0


def cmd_report(args):
    """Analyze the artifacts of a finished run."""
    data = load_manifest(args.manifest)
    analysis = analyze_run(args.run_dir, data)
    print(render_text(analysis))
    for g, mean in analysis['trajectory']:
        print('generation {0:>3} top-3 mean {1:.4f}'.format(g, mean))
    return 0


def cmd_mock_demo(args):
    """Build a synthetic corpus and run the pipeline on the mock LVLM."""
    cfg = resolve_config(args, mock=True)
    corpus = os.path.join(cfg.output_dir, 'corpus')
    data = make_synthetic_corpus(corpus, args.images, cfg.seed,
                                 n_dev=args.dev_images)
    artifacts = run_ddl(cfg, data)
    print(render_text(artifacts.report))
    return 0


def main(argv=None):
    """
    Run the command line interface.

    :param argv: arguments, ``sys.argv[1:]`` by default
    :return: exit status
    """
    logging.basicConfig(format=LOG_FORMAT, level=logging.INFO)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        parser.error(str(exc))
    except (DDLError, OSError) as exc:
        log.error('%s', exc)
        return 1


if __name__ == '__main__':
    sys.exit(main())
