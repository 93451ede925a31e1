"""
fedcmd-sim federated learning simulator

(C) 2024

run reports and plot data

A run writes report.json (config, vote ledger, round records, final per-client
and per-class accuracy, communication totals) and rounds.csv. The report
command reads any number of reports and writes a markdown comparison table and
three plot CSVs: accuracy per round, cumulative bytes per round and a
histogram of per-class accuracy.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from engine.Errors import ConfigError
from engine.FedLogger import LOGGER

ROUND_FIELDS = ('round', 'phase', 'sampled', 'acc_mean', 'acc_std', 'loss',
                'bytes_up', 'bytes_down', 'bytes_similarity', 'winner')
HISTOGRAM_BINS = 10
LABELS_FILE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'profile', 'nls', 'en_us.txt')


@dataclass
class RoundRecord:
    round: int
    phase: str
    sampled: List[int]
    loss: float
    bytes_up: int = 0
    bytes_down: int = 0
    bytes_similarity: int = 0
    acc_mean: Optional[float] = None
    acc_std: Optional[float] = None
    winner: Optional[str] = None

    def to_row(self) -> dict:
        row = asdict(self)
        row['sampled'] = ' '.join(str(c) for c in self.sampled)
        for key in ('acc_mean', 'acc_std', 'winner'):
            if row[key] is None:
                row[key] = ''
        for key in ('loss', 'acc_mean', 'acc_std'):
            if isinstance(row[key], (float, np.floating)):
                row[key] = repr(float(row[key]))
        return row

    @classmethod
    def from_dict(cls, doc) -> 'RoundRecord':
        return cls(**{k: doc.get(k) for k in ROUND_FIELDS})


@dataclass
class Evaluation:
    per_client: Dict[int, float]
    per_class: List[float]
    class_counts: List[int]
    mean: float = 0.0
    std: float = 0.0
    pooled: float = 0.0

    def to_dict(self) -> dict:
        return {
            'per_client': {str(c): self.per_client[c] for c in sorted(self.per_client)},
            'per_class': list(self.per_class),
            'class_counts': list(self.class_counts),
            'mean': self.mean,
            'std': self.std,
            'pooled': self.pooled,
        }


@dataclass
class RunReport:
    label: str
    strategy: str
    config: dict
    dataset: dict
    rounds: List[RoundRecord]
    final: Evaluation
    ledger: Optional[dict] = None
    personalized_layer: Optional[str] = None
    communication: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'label': self.label,
            'strategy': self.strategy,
            'config': self.config,
            'dataset': self.dataset,
            'personalized_layer': self.personalized_layer,
            'ledger': self.ledger,
            'rounds': [asdict(r) for r in self.rounds],
            'final': self.final.to_dict(),
            'communication': self.communication,
        }


def load_labels(path=LABELS_FILE) -> Dict[str, str]:
    """KEY = value pairs from an nls file; lines starting with # are comments."""
    labels = {}
    try:
        with open(path, encoding='utf-8') as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith('#') or '=' not in line:
                    continue
                key, value = line.split('=', 1)
                labels[key.strip()] = value.strip()
    except OSError as ex:
        LOGGER.warning('No display labels ({}), using raw names'.format(ex))
    return labels


def strategy_label(strategy, labels=None) -> str:
    labels = load_labels() if labels is None else labels
    return labels.get('ST-{}-NAME'.format(strategy), strategy)


def write_rounds_csv(records: List[RoundRecord], path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=ROUND_FIELDS)
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())


def write_report(report: RunReport, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    LOGGER.info('Report written to {}'.format(path))


def load_report(path) -> dict:
    try:
        with open(path, encoding='utf-8') as f:
            doc = json.load(f)
    except (OSError, ValueError) as ex:
        LOGGER.error('Failed to load report {}: {}'.format(path, ex))
        raise ConfigError('Cannot read run report {}: {}'.format(path, ex)) from ex
    missing = [k for k in ('label', 'strategy', 'dataset', 'rounds', 'final') if k not in doc]
    if missing:
        raise ConfigError('Run report {} is missing {}'.format(path, missing))
    return doc


def check_compatible(reports: List[dict], paths=None):
    """All reports must describe the same dataset."""
    if not reports:
        raise ConfigError('The report command needs at least one run report')
    paths = paths or [str(i) for i in range(len(reports))]
    first = reports[0]['dataset']
    for doc, path in zip(reports[1:], paths[1:]):
        if doc['dataset'] != first:
            raise ConfigError('Report {} uses dataset {} but {} uses {}'.format(
                path, doc['dataset'], paths[0], first))


def _pct(x):
    return '{:.2f}'.format(100.0 * x)


def comparison_table(reports: List[dict], labels=None) -> str:
    labels = load_labels() if labels is None else labels
    head = [labels.get('COL-label-NAME', 'Strategy'), labels.get('COL-acc-NAME', 'Accuracy (%)'),
            labels.get('COL-layer-NAME', 'Personalized layer'), labels.get('COL-bytes-NAME', 'Total bytes')]
    lines = ['| ' + ' | '.join(head) + ' |', '|' + '---|' * len(head)]
    for doc in reports:
        final = doc['final']
        total = doc.get('communication', {}).get('measured_total', 0)
        lines.append('| {} | {} ± {} | {} | {} |'.format(
            doc['label'], _pct(final['mean']), _pct(final['std']), doc.get('personalized_layer') or '-', total))
    return '\n'.join(lines) + '\n'


def accuracy_rows(reports: List[dict]):
    for doc in reports:
        for r in doc['rounds']:
            if r.get('acc_mean') is not None:
                yield {'label': doc['label'], 'round': r['round'], 'acc_mean': repr(float(r['acc_mean'])),
                       'acc_std': repr(float(r['acc_std']))}


def cumulative_rows(reports: List[dict]):
    for doc in reports:
        total = 0
        similarity = 0
        for r in doc['rounds']:
            total += r['bytes_up'] + r['bytes_down']
            similarity += r['bytes_similarity']
            yield {'label': doc['label'], 'round': r['round'], 'cumulative_bytes': total,
                   'cumulative_similarity_bytes': similarity}


def class_histogram_rows(reports: List[dict], bins=HISTOGRAM_BINS):
    """Share of classes (percent) whose pooled accuracy falls in each bin."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    for doc in reports:
        per_class = np.asarray([v for v in doc['final']['per_class'] if v is not None], dtype=np.float64)
        if per_class.size == 0:
            continue
        counts, _ = np.histogram(per_class, bins=edges)
        for i, count in enumerate(counts):
            yield {'label': doc['label'], 'bin_low': _pct(edges[i]), 'bin_high': _pct(edges[i + 1]),
                   'classes_pct': repr(float(100.0 * count / len(per_class)))}


def _write_rows(path, fieldnames, rows):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_comparison(reports: List[dict], outdir, labels=None) -> str:
    os.makedirs(outdir, exist_ok=True)
    table = comparison_table(reports, labels)
    with open(os.path.join(outdir, 'comparison.md'), 'w', encoding='utf-8') as f:
        f.write(table)
    _write_rows(os.path.join(outdir, 'accuracy.csv'), ('label', 'round', 'acc_mean', 'acc_std'),
                accuracy_rows(reports))
    _write_rows(os.path.join(outdir, 'cumulative_bytes.csv'),
                ('label', 'round', 'cumulative_bytes', 'cumulative_similarity_bytes'), cumulative_rows(reports))
    _write_rows(os.path.join(outdir, 'class_histogram.csv'), ('label', 'bin_low', 'bin_high', 'classes_pct'),
                class_histogram_rows(reports))
    LOGGER.info('Comparison of {} runs written to {}'.format(len(reports), outdir))
    return table
