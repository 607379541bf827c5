import csv
import json
import os

import pytest

from openset_margin.config_manager import ConfigManager
from openset_margin.data import load_csv
from openset_margin.errors import ConfigValidationError, DataSchemaError
from openset_margin.runner import (cmd_eval, cmd_generate, cmd_train, generate_datasets, load_datasets, summarize,
                                   train_run)

RUN_FILES = ('checkpoint.json', 'metrics.json', 'history.json', 'trace.csv', 'embeddings.csv', 'manifest.json')


def _read_json(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def test_generate_writes_data_and_manifest(tiny_manager, tmp_path):
    out = tmp_path / 'data'
    cmd_generate(tiny_manager, str(out))
    assert sorted(os.listdir(out)) == ['manifest.json', 'source.csv', 'target.csv']
    manifest = _read_json(out / 'manifest.json')
    assert manifest['command'] == 'generate'
    assert manifest['config_hash'] == tiny_manager.config_hash()
    assert manifest['seed'] == tiny_manager.config['seed']
    source = load_csv(str(out / 'source.csv'))
    assert len(source) == 36 and source.dim == 4


def test_regeneration_from_manifest_is_identical(tiny_manager, tmp_path):
    cmd_generate(tiny_manager, str(tmp_path / 'first'))
    again = ConfigManager.from_manifest(str(tmp_path / 'first' / 'manifest.json')).validate()
    cmd_generate(again, str(tmp_path / 'second'))
    for name in ('source.csv', 'target.csv'):
        assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()


def test_load_datasets_checks_domains(tiny_manager, tmp_path):
    out = tmp_path / 'data'
    cmd_generate(tiny_manager, str(out))
    os.replace(out / 'source.csv', out / 'swap.csv')
    os.replace(out / 'target.csv', out / 'source.csv')
    os.replace(out / 'swap.csv', out / 'target.csv')
    with pytest.raises(DataSchemaError):
        load_datasets(str(out))


def test_train_run_writes_every_artifact(tiny_manager, tmp_path):
    source, target = generate_datasets(tiny_manager)
    run_dir = tmp_path / 'run'
    result = train_run(tiny_manager, source, target, str(run_dir))
    for name in RUN_FILES:
        assert (run_dir / name).exists(), name

    assert _read_json(run_dir / 'metrics.json') == result.metrics.to_dict()
    assert len(_read_json(run_dir / 'history.json')) == 4
    with open(run_dir / 'trace.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert [(r['stage'], r['epoch']) for r in rows] == [('1', '1'), ('1', '2'), ('2', '1'), ('2', '2')]
    assert rows[0]['os'] == '' and rows[-1]['os'] != ''
    assert {'gap_0', 'margin_2', 'loss_con', 'reliable_fraction'} <= set(rows[0])
    assert _read_json(run_dir / 'manifest.json')['train_seed'] == tiny_manager.config['seed']


def test_eval_reproduces_final_metrics(tiny_manager, tmp_path):
    cmd_train(tiny_manager, str(tmp_path / 'run'), generate=True)
    checkpoint = str(tmp_path / 'run' / 'checkpoint.json')
    target = str(tmp_path / 'run' / 'data' / 'target.csv')
    final = _read_json(tmp_path / 'run' / 'metrics.json')

    first = cmd_eval(checkpoint, target, str(tmp_path / 'eval' / 'first.json'))
    cmd_eval(checkpoint, target, str(tmp_path / 'eval' / 'second.json'))
    evaluated = first.to_dict()
    for key in ('os', 'os_star', 'all', 'unk', 'per_class', 'confusion'):
        assert evaluated[key] == final[key]
    assert (tmp_path / 'eval' / 'first.json').read_bytes() == (tmp_path / 'eval' / 'second.json').read_bytes()


def test_eval_rejects_dimension_mismatch(tiny_manager, tmp_path):
    cmd_train(tiny_manager, str(tmp_path / 'run'), generate=True)
    other = tiny_manager.copy()
    other.set('data.dim', 5)
    cmd_generate(other.validate(), str(tmp_path / 'wide'))
    with pytest.raises(DataSchemaError):
        cmd_eval(str(tmp_path / 'run' / 'checkpoint.json'), str(tmp_path / 'wide' / 'target.csv'))


def test_train_needs_a_data_source(tiny_manager, tmp_path):
    with pytest.raises(ConfigValidationError):
        cmd_train(tiny_manager, str(tmp_path / 'run'))


def test_train_from_a_data_directory(tiny_manager, tmp_path):
    cmd_generate(tiny_manager, str(tmp_path / 'data'))
    records = cmd_train(tiny_manager, str(tmp_path / 'run'), data_dir=str(tmp_path / 'data'))
    assert len(records) == 1
    assert not (tmp_path / 'run' / 'data').exists()


def test_identical_runs_write_identical_files(tiny_manager, tmp_path):
    cmd_train(tiny_manager, str(tmp_path / 'a'), generate=True)
    cmd_train(tiny_manager, str(tmp_path / 'b'), generate=True)
    for name in ('metrics.json', 'checkpoint.json', 'trace.csv'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes(), name


def test_multiple_seeds_write_a_summary(tiny_manager, tmp_path):
    records = cmd_train(tiny_manager, str(tmp_path / 'run'), seeds=2, generate=True)
    assert len(records) == 2
    assert (tmp_path / 'run' / 'seed_0' / 'metrics.json').exists()
    assert (tmp_path / 'run' / 'seed_1' / 'metrics.json').exists()
    summary = _read_json(tmp_path / 'run' / 'summary.json')
    assert summary['runs'] == 2
    assert summary['os']['values'] == [r.os for r in records]
    assert _read_json(tmp_path / 'run' / 'seed_1' / 'manifest.json')['train_seed'] == 1


def test_summarize_reports_mean_and_std():
    class Record:
        def __init__(self, value):
            self.os = self.os_star = self.all = self.unk = value

    summary = summarize([Record(40.0), Record(60.0)])
    assert summary['os'] == {'mean': 50.0, 'std': 10.0, 'values': [40.0, 60.0]}
