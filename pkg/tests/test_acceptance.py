"""Directional experiments on the default synthetic benchmark; run with `pytest -m slow`"""

import numpy as np
import pytest

from openset_margin.config_manager import ConfigManager
from openset_margin.runner import generate_datasets
from openset_margin.trainer import train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def _runs(ablate=None, static_margin=None, unknown_ratio=None):
    results = []
    for seed in SEEDS:
        manager = ConfigManager()
        manager.apply_overrides(seed=seed, ablate=ablate, static_margin=static_margin)
        if unknown_ratio is not None:
            manager.set('data.unknown_ratio', unknown_ratio)
        manager.validate()
        source, target = generate_datasets(manager)
        specs = manager.model_specs(source.dim, int(source.labels.max()) + 1)
        results.append(train(manager.train_config(), specs, source, target))
    return results


def _mean_os(results):
    return float(np.mean([r.metrics.os for r in results]))


def _mean_unk(results):
    return float(np.mean([r.metrics.unk for r in results]))


@pytest.fixture(scope='module')
def full_method():
    return _runs()


def test_full_method_detects_unknowns(full_method):
    assert _mean_unk(full_method) > 0.0


def test_full_method_beats_every_ablation(full_method):
    full = _mean_os(full_method)
    for ablate in ('no-sca', 'no-scm', 'ada-only'):
        assert full >= _mean_os(_runs(ablate=ablate)), ablate


def test_adaptive_margin_is_competitive_with_static_margins(full_method):
    best_static = max(_mean_os(_runs(static_margin=m)) for m in (5.0, 10.0, 20.0, 40.0))
    assert _mean_os(full_method) >= best_static - 1.0


def test_cross_domain_gaps_shrink(full_method):
    first, last = [], []
    for result in full_method:
        stage2 = [r for r in result.history if r.stage == 2]
        first.append(np.mean(stage2[0].gaps))
        last.append(np.mean(stage2[-1].gaps))
    assert np.mean(last) < np.mean(first)


def test_unknown_ratio_robustness():
    full, ada = [], []
    for ratio in (0.2, 0.4, 0.6, 0.8):
        runs = _runs(unknown_ratio=ratio)
        assert _mean_unk(runs) > 0.0, ratio
        full.append(_mean_os(runs))
        ada.append(_mean_os(_runs(ablate='ada-only', unknown_ratio=ratio)))
        assert full[-1] >= ada[-1], ratio
    assert np.std(full) <= 2.0 * np.std(ada)
