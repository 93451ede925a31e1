"""
fedcmd-sim federated learning simulator

(C) 2024

command line

    partition  draw the Dirichlet client split and write plan.json
    run        run one experiment, write report.json and rounds.csv
    report     compare run reports, write comparison.md and plot CSVs
    sweep      run one experiment for several values of rho or alpha

Exit codes: 0 success, 2 configuration or validation error, 3 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from engine.Config import STRATEGIES, DatasetSource, ExperimentFile, dump_experiment, load_experiment, override
from engine.Dataset import Dataset, generate_synthetic, label_entropy, load_idx
from engine.Errors import ConfigError, FedError
from engine.FedLogger import LOGGER, setup_logging
from engine.Partition import PartitionPlan, client_histograms, dirichlet_partition
from engine.Report import RunReport, check_compatible, load_report, strategy_label, write_comparison, \
    write_report, write_rounds_csv
from nodes.Controller import Controller
from nodes.Rounds import predict_communication

SWEEP_PARAMS = ('rho', 'alpha')


def load_dataset(source: DatasetSource, seed) -> Dataset:
    if source.source == 'idx':
        return load_idx(source.images, source.labels, source.num_classes)
    return generate_synthetic(source.num_classes, source.samples_per_class, source.input_shape,
                              source.class_separation, seed)


def _experiment(args) -> ExperimentFile:
    exp = load_experiment(args.config) if args.config else ExperimentFile()
    return override(exp, strategy=getattr(args, 'strategy', None), master_seed=args.seed, dir=args.out,
                    eval_every=getattr(args, 'eval_every', None), workers=getattr(args, 'workers', None))


def write_run(report: RunReport, exp: ExperimentFile, plan: PartitionPlan):
    outdir = exp.output.dir
    os.makedirs(outdir, exist_ok=True)
    write_report(report, os.path.join(outdir, 'report.json'))
    write_rounds_csv(report.rounds, os.path.join(outdir, 'rounds.csv'))
    dump_experiment(exp, os.path.join(outdir, 'experiment.yaml'))
    plan.save(os.path.join(outdir, 'plan.json'))


def execute(controller: Controller) -> RunReport:
    report = controller.start()
    write_run(report, controller.experiment, controller.plan)
    LOGGER.info('Done {}: mean accuracy {:.4f}, {} bytes'.format(
        report.label, report.final.mean, report.communication['measured_total']))
    return report


def cmd_partition(args):
    exp = _experiment(args)
    config = exp.run
    data = load_dataset(exp.dataset, config.synthetic_seed)
    plan = dirichlet_partition(data, config.alpha, config.num_clients, config.partition_seed)
    os.makedirs(exp.output.dir, exist_ok=True)
    path = os.path.join(exp.output.dir, 'plan.json')
    plan.save(path)

    hist = client_histograms(data, plan)
    print('client,' + ','.join('class_{}'.format(c) for c in range(data.num_classes)) + ',entropy')
    for cid, row in enumerate(hist):
        labels = data.labels[np.asarray(plan.assignment[cid], dtype=np.int64)]
        print('{},{},{:.4f}'.format(cid, ','.join(str(int(n)) for n in row), label_entropy(labels, data.num_classes)))
    LOGGER.info('Partition plan for {} clients (alpha={}) written to {}'.format(
        config.num_clients, config.alpha, path))
    return 0


def _dry_run(controller: Controller):
    config = controller.config
    model = controller.global_model
    prediction = predict_communication(config, model.param_count)
    print('strategy {}: {} rounds, {} clients per round, {} parameters'.format(
        config.strategy, config.rounds, config.clients_per_round, model.param_count))
    print('predicted bytes (up + down): {}'.format(prediction.formula))
    if config.strategy == 'fedcmd':
        for layer in model.votable_names:
            total = predict_communication(config, model.param_count, model.layer_size(layer)).total
            print('  if {} is chosen: {}'.format(layer, total))
    elif config.strategy == 'fixed-head':
        head = model.layer_size(controller.fixed_head_layer())
        print('  total: {}'.format(predict_communication(config, model.param_count, head).total))
    else:
        print('  total: {}'.format(prediction.total))
    return 0


def cmd_run(args):
    exp = _experiment(args)
    data = load_dataset(exp.dataset, exp.run.synthetic_seed)
    plan = None
    if args.plan:
        plan = PartitionPlan.load(args.plan)
        plan.validate(len(data))
    controller = Controller(exp, data, plan)
    controller.checkParams()
    if args.dry_run:
        return _dry_run(controller)
    setup_logging(args.log_level, exp.output.dir)
    execute(controller)
    return 0


def cmd_report(args):
    docs = [load_report(path) for path in args.reports]
    check_compatible(docs, args.reports)
    print(write_comparison(docs, args.out), end='')
    return 0


def cmd_sweep(args):
    exp = _experiment(args)
    if args.param == 'rho' and exp.run.strategy != 'fedcmd':
        raise ConfigError('A rho sweep needs strategy fedcmd, got {}'.format(exp.run.strategy))
    try:
        values = [float(v) for v in args.values.split(',') if v.strip()]
    except ValueError:
        raise ConfigError('--values must be a comma separated list of numbers, got {}'.format(args.values))
    if not values:
        raise ConfigError('--values is empty')
    data = load_dataset(exp.dataset, exp.run.synthetic_seed)
    setup_logging(args.log_level, exp.output.dir)
    docs = []
    for value in values:
        tag = '{}={:g}'.format(args.param, value)
        run = override(exp, **{args.param: value, 'dir': os.path.join(exp.output.dir, tag)})
        report = execute(Controller(run, data, label='{} {}'.format(strategy_label(run.run.strategy), tag)))
        docs.append(report.to_dict())
    print(write_comparison(docs, exp.output.dir), end='')
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='fedcmd-sim', description='federated learning simulator')
    parser.add_argument('--log-level', default='INFO', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('--config', help='experiment YAML file')
        p.add_argument('--seed', type=int, help='master seed')
        p.add_argument('--out', help='output directory')

    p = sub.add_parser('partition', help='write a client partition plan')
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser('run', help='run one experiment')
    common(p)
    p.add_argument('--plan', help='partition plan from the partition command')
    p.add_argument('--strategy', choices=STRATEGIES)
    p.add_argument('--dry-run', action='store_true', help='validate and print the communication formula')
    p.add_argument('--eval-every', type=int)
    p.add_argument('--workers', type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('report', help='compare run reports')
    p.add_argument('reports', nargs='+', help='report.json files')
    p.add_argument('--out', default='.', help='output directory')
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('sweep', help='run an experiment over several rho or alpha values')
    common(p)
    p.add_argument('--param', required=True, choices=SWEEP_PARAMS)
    p.add_argument('--values', required=True, help='comma separated, e.g. 0.05,0.1,0.2')
    p.add_argument('--strategy', choices=STRATEGIES)
    p.add_argument('--eval-every', type=int)
    p.add_argument('--workers', type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except FedError as err:
        LOGGER.error('{}: {}'.format(type(err).__name__, err))
        print('error: {}'.format(err), file=sys.stderr)
        return err.exit_code
