import csv
import json

import pytest

from openset_margin.errors import ConfigValidationError
from openset_margin.sweep import DEFAULT_GRIDS, RESULT_COLUMNS, SWEEP_AXES, plan_runs, run_sweep


def test_default_grids_cover_every_axis():
    assert sorted(DEFAULT_GRIDS) == sorted(SWEEP_AXES)
    assert DEFAULT_GRIDS['omega'] == [0.0, 0.1, 0.5, 1.0, 1.5, 2.0]


def test_plan_has_one_run_per_value_and_seed(tiny_manager, tmp_path):
    runs = plan_runs(tiny_manager, 'omega', [0.0, 0.5, 1.0], 2, str(tmp_path))
    assert len(runs) == 6
    assert [(r.value, r.seed) for r in runs[:2]] == [(0.0, 0), (0.0, 1)]
    assert runs[3].manager.get('loss.omega') == 0.5
    assert runs[3].manager.get('seed') == 1
    assert runs[3].run_dir.endswith('omega_0.5/seed_1')
    assert tiny_manager.get('loss.omega') == 0.5 and tiny_manager.get('seed') == 0


@pytest.mark.parametrize('axis, values, seeds', [
    ('learning_rate', [0.1], 1),
    ('omega', [], 1),
    ('omega', [0.5], 0),
])
def test_invalid_plans_are_rejected(tiny_manager, tmp_path, axis, values, seeds):
    with pytest.raises(ConfigValidationError):
        plan_runs(tiny_manager, axis, values, seeds, str(tmp_path))


def test_invalid_axis_value_is_rejected_before_any_run(tiny_manager, tmp_path):
    with pytest.raises(ConfigValidationError):
        plan_runs(tiny_manager, 'unknown_ratio', [0.5, 1.5], 1, str(tmp_path))


def test_in_process_sweep_writes_sorted_results(tiny_manager, tmp_path):
    rows = run_sweep(tiny_manager, 'static_margin', [20.0, 5.0], 1, str(tmp_path / 'sweep'))
    assert [row['value'] for row in rows] == [5.0, 20.0]
    with open(tmp_path / 'sweep' / 'sweep_results.csv', newline='') as f:
        table = list(csv.reader(f))
    assert tuple(table[0]) == RESULT_COLUMNS
    assert len(table) == 3
    assert [r[1] for r in table[1:]] == ['5.0', '20.0']
    manifest = json.loads((tmp_path / 'sweep' / 'manifest.json').read_text())
    assert manifest['axis'] == 'static_margin' and manifest['seeds'] == 1
    assert (tmp_path / 'sweep' / 'static_margin_20' / 'seed_0' / 'metrics.json').exists()


def test_sweep_rejects_zero_workers(tiny_manager, tmp_path):
    with pytest.raises(ConfigValidationError):
        run_sweep(tiny_manager, 'omega', [0.5], 1, str(tmp_path), workers=0)


@pytest.mark.slow
def test_worker_processes_match_in_process_runs(tiny_manager, tmp_path):
    serial = run_sweep(tiny_manager, 'omega', [0.0, 1.0], 1, str(tmp_path / 'serial'))
    parallel = run_sweep(tiny_manager, 'omega', [0.0, 1.0], 1, str(tmp_path / 'parallel'), workers=2)
    assert [(r['value'], r['os']) for r in serial] == [(r['value'], r['os']) for r in parallel]
