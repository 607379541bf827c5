"""
Sweep for OpenSetMargin - Hyperparameter sweep module.
Runs one training per (value, seed) along a single config axis, in-process or as parallel worker processes.
"""

import csv
import json
import logging
import math
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass

from openset_margin.errors import ConfigValidationError, OpenSetMarginError
from openset_margin.evaluation import MetricsRecord
from openset_margin.runner import generate_datasets, train_run, write_manifest

logger = logging.getLogger('OpenSetMargin.Sweep')

SWEEP_AXES = {
    'omega': 'loss.omega',
    'static_margin': 'train.static_margin',
    'unknown_ratio': 'data.unknown_ratio',
    'threshold': 'train.reliability_threshold',
}

DEFAULT_GRIDS = {
    'omega': [0.0, 0.1, 0.5, 1.0, 1.5, 2.0],
    'static_margin': [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
    'unknown_ratio': [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    'threshold': [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
}

RESULT_COLUMNS = ('axis', 'value', 'seed', 'os', 'os_star', 'all', 'unk')
POLL_INTERVAL = 0.2


@dataclass
class SweepRun:
    axis: str
    value: float
    seed: int
    run_dir: str
    manager: object


def plan_runs(manager, axis, values, seeds, out_dir):
    """
    One resolved configuration per (value, seed)

    Seed i of the sweep sets the config seed to base + i, so data generation and training both move.
    """
    if axis not in SWEEP_AXES:
        raise ConfigValidationError(f"Unknown sweep axis '{axis}', expected one of {sorted(SWEEP_AXES)}",
                                    field='axis')
    if not values:
        raise ConfigValidationError("Sweep needs at least one value", field='values')
    if seeds < 1:
        raise ConfigValidationError(f"--seeds must be >= 1, got {seeds}", field='seeds')

    base_seed = manager.config['seed']
    runs = []
    for value in values:
        value = float(value)
        for i in range(seeds):
            run_manager = manager.copy()
            run_manager.set(SWEEP_AXES[axis], value)
            run_manager.set('seed', base_seed + i)
            run_dir = os.path.join(out_dir, f"{axis}_{value:g}", f"seed_{base_seed + i}")
            run_manager.set('output_dir', run_dir)
            run_manager.validate()
            runs.append(SweepRun(axis, value, base_seed + i, run_dir, run_manager))
    return runs


def _read_metrics(run):
    path = os.path.join(run.run_dir, 'metrics.json')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return MetricsRecord.from_dict(json.load(f))
    except (OSError, ValueError, KeyError) as e:
        raise OpenSetMarginError(f"Sweep run {run.run_dir} left no readable metrics.json: {e}") from e


def _run_in_process(run):
    source, target = generate_datasets(run.manager)
    return train_run(run.manager, source, target, run.run_dir).metrics


def _launch_worker(run):
    """Start one `train` process on a temporary copy of the run's config"""
    config_file = tempfile.NamedTemporaryFile(mode='w', suffix='.json', delete=False)
    config_file.write(run.manager.to_json())
    config_file.close()

    os.makedirs(run.run_dir, exist_ok=True)
    env = os.environ.copy()
    package_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    env['PYTHONPATH'] = os.pathsep.join(p for p in (package_root, env.get('PYTHONPATH')) if p)
    process = subprocess.Popen([
        sys.executable,
        '-m', 'openset_margin.main',
        'train',
        '--config', config_file.name,
        '--out', run.run_dir,
        '--generate',
    ], env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    logger.info(f"Launched worker for {run.axis}={run.value:g} seed {run.seed}")
    return process, config_file.name


def _run_workers(runs, workers):
    pending = list(runs)
    active = []
    results = {}
    failed = []
    try:
        while pending or active:
            while pending and len(active) < workers:
                run = pending.pop(0)
                process, config_path = _launch_worker(run)
                active.append((run, process, config_path))
            still_running = []
            for run, process, config_path in active:
                code = process.poll()
                if code is None:
                    still_running.append((run, process, config_path))
                    continue
                os.unlink(config_path)
                if code != 0:
                    logger.error(f"Worker for {run.run_dir} exited with code {code}")
                    failed.append(run.run_dir)
                else:
                    results[id(run)] = _read_metrics(run)
            active = still_running
            if active:
                time.sleep(POLL_INTERVAL)
    finally:
        for _, process, config_path in active:
            process.terminate()
            process.wait()
            if os.path.exists(config_path):
                os.unlink(config_path)
    if failed:
        raise OpenSetMarginError(f"Sweep runs failed: {', '.join(failed)}")
    return [results[id(run)] for run in runs]


def _format(value):
    return '' if math.isnan(value) else repr(float(value))


def write_results(path, rows):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([row['axis'], repr(row['value']), row['seed']]
                            + [_format(row[key]) for key in RESULT_COLUMNS[3:]])


def run_sweep(manager, axis, values, seeds, out_dir, workers=1):
    """
    Train every (value, seed) pair along one axis and collect the final target metrics

    Args:
        manager (ConfigManager): Base configuration
        axis (str): One of omega, static_margin, unknown_ratio, threshold
        values (list): Axis values
        seeds (int): Runs per value
        out_dir (str): Sweep directory; gets sweep_results.csv and manifest.json
        workers (int): 1 runs in-process; more runs that many worker processes at a time

    Returns:
        list: Result rows sorted by (value, seed)
    """
    if workers < 1:
        raise ConfigValidationError(f"--workers must be >= 1, got {workers}", field='workers')
    runs = plan_runs(manager, axis, values, seeds, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    logger.info(f"Sweeping {axis} over {len(values)} values x {seeds} seeds ({len(runs)} runs, {workers} workers)")

    if workers == 1:
        metrics = [_run_in_process(run) for run in runs]
    else:
        metrics = _run_workers(runs, workers)

    rows = [{'axis': run.axis, 'value': run.value, 'seed': run.seed, 'os': m.os, 'os_star': m.os_star,
             'all': m.all, 'unk': m.unk} for run, m in zip(runs, metrics)]
    rows.sort(key=lambda row: (row['value'], row['seed']))
    write_results(os.path.join(out_dir, 'sweep_results.csv'), rows)
    write_manifest(os.path.join(out_dir, 'manifest.json'), 'sweep', manager,
                   {'axis': axis, 'values': [float(v) for v in values], 'seeds': seeds,
                    'files': ['sweep_results.csv']})
    logger.info(f"Sweep finished, results in {os.path.join(out_dir, 'sweep_results.csv')}")
    return rows
