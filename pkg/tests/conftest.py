import copy
import json
import logging

import numpy as np
import pytest

from openset_margin import autodiff as ad
from openset_margin.config_manager import DEFAULT_CONFIG, ConfigManager
from openset_margin.model import default_specs, init_params

TINY_OVERRIDES = {
    'data': {'n_known': 3, 'n_unknown_subclasses': 1, 'dim': 4, 'samples_per_class': 12, 'noise_sigma': 0.5},
    'model': {'encoder_hidden': [8, 6], 'generator_width': 6},
    'train': {'lr_init': 1e-2, 'batch_size': 8, 'epochs_stage1': 2, 'epochs_stage2': 2},
}


def _merge(base, overrides):
    for key, value in overrides.items():
        if isinstance(value, dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def numeric_grad(build, node, eps=1e-6):
    """Central differences of build().item() with respect to every entry of node"""
    grad = np.zeros_like(node.data)
    for idx in np.ndindex(node.data.shape):
        original = node.data[idx]
        node.data[idx] = original + eps
        plus = build().item()
        node.data[idx] = original - eps
        minus = build().item()
        node.data[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def gradient_error(build, nodes, eps=1e-6):
    """Relative error between backprop and central differences over all nodes together"""
    ad.zero_grad(nodes)
    ad.backward(build())
    analytic = np.concatenate([n.grad.ravel().copy() for n in nodes])
    numeric = np.concatenate([numeric_grad(build, n, eps).ravel() for n in nodes])
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-8)
    return np.linalg.norm(analytic - numeric) / scale


@pytest.fixture
def grad_error():
    return gradient_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_params():
    """N=3 known classes, d=4 inputs, small widths"""
    specs = default_specs(4, 3, encoder_hidden=(5, 4), generator_width=4)
    return init_params(specs, seed=7)


@pytest.fixture
def toy_batch(rng):
    """4 source samples covering every known class, 4 target samples"""
    x_s = rng.standard_normal((4, 4))
    y_s = np.array([0, 1, 2, 0])
    x_t = rng.standard_normal((4, 4))
    return x_s, y_s, x_t


@pytest.fixture
def tiny_config():
    return _merge(copy.deepcopy(DEFAULT_CONFIG), copy.deepcopy(TINY_OVERRIDES))


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(tiny_config))
    return str(path)


@pytest.fixture
def tiny_manager(tiny_config_file):
    return ConfigManager(tiny_config_file).validate()


@pytest.fixture
def restore_logging():
    """Undo the root-logger handlers installed by the command line"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(level)
