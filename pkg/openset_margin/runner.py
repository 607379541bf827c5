"""
Runner for OpenSetMargin - Run orchestration module.
Generates datasets, runs training and evaluation, and writes every run artifact with its manifest.
"""

import csv
import json
import logging
import math
import os

import numpy as np

from openset_margin import __version__
from openset_margin.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from openset_margin.data import SOURCE, TARGET, generate_pair, load_csv, save_csv
from openset_margin.errors import ConfigValidationError, DataSchemaError
from openset_margin.evaluation import dump_embeddings, evaluate
from openset_margin.trainer import LOSS_NAMES, train

logger = logging.getLogger('OpenSetMargin.Runner')

SOURCE_FILE = 'source.csv'
TARGET_FILE = 'target.csv'
METRIC_KEYS = ('os', 'os_star', 'all', 'unk')


def _write_json(path, document):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write('\n')


def write_manifest(path, command, manager, extra=None):
    """Record what produced a directory: command, resolved config and its hash"""
    manifest = {
        'command': command,
        'config': manager.config,
        'config_hash': manager.config_hash(),
        'format_version': FORMAT_VERSION,
        'package_version': __version__,
        'seed': manager.config['seed'],
    }
    manifest.update(extra or {})
    _write_json(path, manifest)
    logger.debug(f"Manifest written to {path}")


def generate_datasets(manager):
    return generate_pair(manager.synthetic_config())


def cmd_generate(manager, out_dir):
    """
    Generate a synthetic pair and write source.csv, target.csv and manifest.json

    Returns:
        tuple: (source path, target path)
    """
    source, target = generate_datasets(manager)
    os.makedirs(out_dir, exist_ok=True)
    source_path = os.path.join(out_dir, SOURCE_FILE)
    target_path = os.path.join(out_dir, TARGET_FILE)
    save_csv(source, source_path)
    save_csv(target, target_path)
    write_manifest(os.path.join(out_dir, 'manifest.json'), 'generate', manager,
                   {'files': [SOURCE_FILE, TARGET_FILE]})
    logger.info(f"Wrote {len(source)} source and {len(target)} target samples to {out_dir}")
    return source_path, target_path


def load_datasets(data_dir):
    """Read source.csv and target.csv from a generated data directory"""
    source = load_csv(os.path.join(data_dir, SOURCE_FILE))
    target = load_csv(os.path.join(data_dir, TARGET_FILE))
    if source.domain != SOURCE or target.domain != TARGET:
        raise DataSchemaError(f"{data_dir}: expected a source and a target file, got '{source.domain}' "
                              f"and '{target.domain}'")
    if source.dim != target.dim:
        raise DataSchemaError(f"{data_dir}: source has {source.dim} features, target has {target.dim}")
    return source, target


def _cell(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ''
    return repr(float(value)) if isinstance(value, float) else value


def write_trace(path, history, n_known):
    """Per-epoch trace: losses, reliable fraction, target metrics, centroid gaps and margins"""
    header = (['stage', 'epoch', 'lr'] + [f"loss_{name}" for name in LOSS_NAMES]
              + ['train_accuracy', 'reliable_fraction'] + list(METRIC_KEYS)
              + [f"gap_{k}" for k in range(n_known)] + [f"margin_{k}" for k in range(n_known)])
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for record in history:
            metrics = record.metrics.to_dict() if record.metrics is not None else {}
            row = [record.stage, record.epoch, _cell(record.lr)]
            row += [_cell(record.losses.get(name)) for name in LOSS_NAMES]
            row += [_cell(record.train_accuracy), _cell(record.reliable_fraction)]
            row += [_cell(metrics.get(key)) for key in METRIC_KEYS]
            row += [_cell(v) for v in (record.gaps or [None] * n_known)]
            row += [_cell(v) for v in (record.margins or [None] * n_known)]
            writer.writerow(row)


def train_run(manager, source, target, run_dir, seed_offset=0):
    """
    Train one seed and write checkpoint.json, metrics.json, history.json, trace.csv,
    embeddings.csv and manifest.json into run_dir

    Returns:
        TrainResult: The finished run
    """
    config = manager.train_config(seed_offset)
    n_known = int(source.labels.max()) + 1
    specs = manager.model_specs(source.dim, n_known)

    result = train(config, specs, source, target)

    os.makedirs(run_dir, exist_ok=True)
    meta = {'config_hash': manager.config_hash(), 'seed': config.seed}
    save_checkpoint(os.path.join(run_dir, 'checkpoint.json'), result.params, result.bank, meta)
    _write_json(os.path.join(run_dir, 'metrics.json'), result.metrics.to_dict())
    _write_json(os.path.join(run_dir, 'history.json'), [record.to_dict() for record in result.history])
    write_trace(os.path.join(run_dir, 'trace.csv'), result.history, n_known)
    dump_embeddings(result.params, [source, target], os.path.join(run_dir, 'embeddings.csv'))
    write_manifest(os.path.join(run_dir, 'manifest.json'), 'train', manager,
                   {'train_seed': config.seed,
                    'files': ['checkpoint.json', 'metrics.json', 'history.json', 'trace.csv', 'embeddings.csv']})
    logger.info(f"Run with seed {config.seed} finished: {result.metrics.summary_line()}")
    return result


def _json_number(value):
    value = float(value)
    return None if math.isnan(value) else value


def summarize(records):
    """Mean and population standard deviation of each headline metric over runs"""
    summary = {'runs': len(records)}
    for key in METRIC_KEYS:
        values = np.array([getattr(r, key) for r in records], dtype=np.float64)
        summary[key] = {'mean': _json_number(np.mean(values)), 'std': _json_number(np.std(values)),
                        'values': [_json_number(v) for v in values]}
    return summary


def cmd_train(manager, out_dir, seeds=1, data_dir=None, generate=False):
    """
    Train one or more seeds on a data directory or on a freshly generated pair

    With more than one seed each run goes to <out_dir>/seed_<i> and summary.json holds the mean
    and standard deviation of OS, OS*, ALL and UNK.

    Returns:
        list: MetricsRecord of every run
    """
    if seeds < 1:
        raise ConfigValidationError(f"--seeds must be >= 1, got {seeds}", field='seeds')
    if data_dir is not None:
        source, target = load_datasets(data_dir)
    elif generate:
        source, target = generate_datasets(manager)
    else:
        raise ConfigValidationError("train needs --data DIR or --generate", field='data')

    os.makedirs(out_dir, exist_ok=True)
    if generate and data_dir is None:
        data_out = os.path.join(out_dir, 'data')
        os.makedirs(data_out, exist_ok=True)
        save_csv(source, os.path.join(data_out, SOURCE_FILE))
        save_csv(target, os.path.join(data_out, TARGET_FILE))

    records = []
    for i in range(seeds):
        run_dir = out_dir if seeds == 1 else os.path.join(out_dir, f"seed_{i}")
        records.append(train_run(manager, source, target, run_dir, seed_offset=i).metrics)

    if seeds > 1:
        summary = summarize(records)
        _write_json(os.path.join(out_dir, 'summary.json'), summary)
        means = ' | '.join(f"{key} {summary[key]['mean']}" for key in METRIC_KEYS)
        logger.info(f"Mean over {seeds} seeds: {means}")
    return records


def cmd_eval(checkpoint_path, target_path, out_path=None):
    """
    Score a saved network on a dataset file without training

    Returns:
        MetricsRecord: Metrics of the checkpoint on the dataset
    """
    params, _, meta = load_checkpoint(checkpoint_path)
    dataset = load_csv(target_path)
    if dataset.dim != params.input_dim:
        raise DataSchemaError(f"{target_path} has {dataset.dim} features but the checkpoint expects "
                              f"{params.input_dim}")
    metrics = evaluate(params, dataset)
    if out_path:
        directory = os.path.dirname(out_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        _write_json(out_path, metrics.to_dict())
    logger.info(f"Evaluation of {checkpoint_path} on {target_path}: {metrics.summary_line()}")
    return metrics
