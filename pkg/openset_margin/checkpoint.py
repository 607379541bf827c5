"""
Checkpoint for OpenSetMargin - Parameter persistence module.
Saves and restores network weights, batch-norm state and the centroid bank as versioned JSON.
"""

import json
import logging
import os

import numpy as np
from packaging.version import InvalidVersion, Version

from openset_margin import autodiff as ad
from openset_margin.centroids import CentroidBank
from openset_margin.errors import CheckpointError, OpenSetMarginError
from openset_margin.model import LayerParams, MLPParams, MLPSpec, NetworkParams

logger = logging.getLogger('OpenSetMargin.Checkpoint')

FORMAT_VERSION = '1.0'
STACKS = ('encoder', 'generator', 'discriminator')


def _spec_to_dict(spec):
    return {
        'layer_widths': list(spec.layer_widths),
        'use_batchnorm': list(spec.use_batchnorm),
        'leaky_alpha': spec.leaky_alpha,
        'activate_output': spec.activate_output,
    }


def _layer_to_dict(layer):
    entry = {'weight': layer.weight.data.tolist(), 'bias': layer.bias.data.tolist()}
    if layer.gamma is not None:
        entry['gamma'] = layer.gamma.data.tolist()
        entry['beta'] = layer.beta.data.tolist()
        entry['running_mean'] = layer.bn_state.running_mean.tolist()
        entry['running_var'] = layer.bn_state.running_var.tolist()
    return entry


def _mlp_from_dict(data, prefix):
    spec = MLPSpec(tuple(data['spec']['layer_widths']), tuple(data['spec']['use_batchnorm']),
                   float(data['spec']['leaky_alpha']), bool(data['spec']['activate_output']))
    layers = []
    for i, entry in enumerate(data['layers']):
        layer = LayerParams(weight=ad.parameter(np.array(entry['weight']), name=f"{prefix}.{i}.weight"),
                            bias=ad.parameter(np.array(entry['bias']), name=f"{prefix}.{i}.bias"))
        if 'gamma' in entry:
            layer.gamma = ad.parameter(np.array(entry['gamma']), name=f"{prefix}.{i}.gamma")
            layer.beta = ad.parameter(np.array(entry['beta']), name=f"{prefix}.{i}.beta")
            layer.bn_state = ad.BatchNormState(np.array(entry['running_mean']), np.array(entry['running_var']))
        layers.append(layer)
    if len(layers) != spec.n_layers:
        raise CheckpointError(f"{prefix} declares {spec.n_layers} layers but stores {len(layers)}")
    return MLPParams(spec, layers)


def params_to_dict(params):
    return {name: {'spec': _spec_to_dict(getattr(params, name).spec),
                   'layers': [_layer_to_dict(layer) for layer in getattr(params, name).layers]}
            for name in STACKS}


def params_from_dict(data):
    return NetworkParams(*(_mlp_from_dict(data[name], name) for name in STACKS))


def save_checkpoint(path, params, bank=None, meta=None):
    """
    Write params, bank and metadata as one JSON document

    Keys are sorted and floats use their shortest round-tripping repr, so identical state gives
    identical bytes and loading restores every float64 exactly.

    Args:
        path (str): Output file
        params (NetworkParams): Network weights and batch-norm state
        bank (CentroidBank): Optional centroid bank
        meta (dict): Optional JSON-serializable metadata
    """
    document = {
        'format_version': FORMAT_VERSION,
        'params': params_to_dict(params),
        'bank': bank.to_dict() if bank is not None else None,
        'meta': meta or {},
    }
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f, sort_keys=True, indent=1)
            f.write('\n')
    except (OSError, TypeError, ValueError) as e:
        raise CheckpointError(f"Failed to save checkpoint to {path}: {e}") from e
    logger.info(f"Checkpoint saved to {path}")


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint

    Returns:
        tuple: (NetworkParams, CentroidBank or None, meta dict)
    """
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = json.load(f)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e

    try:
        version = Version(str(document['format_version']))
    except (KeyError, TypeError, InvalidVersion) as e:
        raise CheckpointError(f"Checkpoint {path} has no valid format_version") from e
    if version.major > Version(FORMAT_VERSION).major:
        raise CheckpointError(f"Checkpoint {path} has format {version}, this build reads up to {FORMAT_VERSION}")

    try:
        params = params_from_dict(document['params'])
        bank = CentroidBank.from_dict(document['bank']) if document.get('bank') is not None else None
    except (KeyError, TypeError, ValueError, OpenSetMarginError) as e:
        raise CheckpointError(f"Checkpoint {path} is malformed: {e}") from e
    logger.info(f"Checkpoint loaded from {path}")
    return params, bank, document.get('meta', {})
