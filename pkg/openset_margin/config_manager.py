"""
Configuration Manager for OpenSetMargin - Configuration management module.
Handles loading, validating, overriding and hashing run configuration settings.
"""

import copy
import hashlib
import json
import logging
import os

from openset_margin.data import SyntheticConfig
from openset_margin.errors import ConfigValidationError
from openset_margin.losses import LossWeights
from openset_margin.model import default_specs
from openset_margin.trainer import TrainConfig

logger = logging.getLogger('OpenSetMargin.ConfigManager')

DEFAULT_CONFIG = {
    'seed': 0,
    'output_dir': 'runs/default',
    'data': {
        'n_known': 4,
        'n_unknown_subclasses': 2,
        'dim': 8,
        'samples_per_class': 200,
        'shift_rotation': 0.5,
        'shift_translation': [],
        'noise_sigma': 1.0,
        'unknown_ratio': 0.5,
        'class_spread': 4.0,
        'unknown_spread': 6.0,
        'guard_factor': 3.0
    },
    'model': {
        'encoder_hidden': [32, 16],
        'generator_width': 16,
        'leaky_alpha': 0.01
    },
    'train': {
        'lr_init': 2e-3,
        'weight_decay': 1e-6,
        'batch_size': 32,
        'epochs_stage1': 20,
        'epochs_stage2': 20,
        'reliability_threshold': None,
        'disable_sca': False,
        'disable_scm': False,
        'static_margin': None,
        'freeze_encoder': True
    },
    'loss': {
        'lambda_s': 0.02,
        'lambda_c': 0.005,
        'lambda_t': 1e-4,
        'omega': 0.5,
        'delta': 1e-6,
        'adv_lambda': 1.0,
        'literal_dist': False
    },
    'general': {
        'log_level': 'INFO'
    }
}

ABLATIONS = {
    'no-sca': {'train.disable_sca': True},
    'no-scm': {'train.disable_scm': True},
    'ada-only': {'train.disable_sca': True, 'train.disable_scm': True},
}

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


def _typed(builder, section, **kwargs):
    try:
        return builder(**kwargs)
    except ConfigValidationError as e:
        raise ConfigValidationError(f"{section}.{e.field}: {e}", field=f"{section}.{e.field}") from e
    except (TypeError, ValueError) as e:
        raise ConfigValidationError(f"invalid '{section}' settings: {e}", field=section) from e


class ConfigManager:
    """Configuration manager for OpenSetMargin runs"""

    def __init__(self, config_file=None):
        """
        Initialize configuration manager

        Args:
            config_file (str): Optional JSON file merged over the defaults
        """
        self.config = copy.deepcopy(DEFAULT_CONFIG)
        self.config_file = config_file
        if config_file:
            self.load_config(config_file)

    def load_config(self, path):
        """Merge a JSON config file over the current settings"""
        if not os.path.exists(path):
            raise ConfigValidationError(f"Configuration file not found: {path}", field='config')
        try:
            with open(path, 'r', encoding='utf-8') as f:
                loaded_config = json.load(f)
        except ValueError as e:
            raise ConfigValidationError(f"Configuration file {path} is not valid JSON: {e}", field='config') from e
        if not isinstance(loaded_config, dict):
            raise ConfigValidationError(f"Configuration file {path} must hold a JSON object", field='config')

        self._update_dict(self.config, loaded_config)
        self.config_file = path
        logger.info(f"Configuration loaded from {path}")

    @classmethod
    def from_manifest(cls, path):
        """Rebuild the configuration recorded in a run manifest"""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                manifest = json.load(f)
            config = manifest['config']
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ConfigValidationError(f"Cannot read a config from manifest {path}: {e}", field='manifest') from e
        manager = cls()
        manager._update_dict(manager.config, config)
        return manager

    def save_config(self, path):
        """Save configuration to file"""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.config, f, indent=4, sort_keys=True)
        logger.info(f"Configuration saved to {path}")

    def _update_dict(self, target, source, prefix=''):
        """Update target dictionary with values from source dictionary, rejecting unknown keys"""
        for key, value in source.items():
            dotted = f"{prefix}{key}"
            if key not in target:
                raise ConfigValidationError(f"Unknown configuration key '{dotted}'", field=dotted)
            if isinstance(target[key], dict):
                if not isinstance(value, dict):
                    raise ConfigValidationError(f"'{dotted}' must be an object", field=dotted)
                self._update_dict(target[key], value, prefix=f"{dotted}.")
            else:
                target[key] = value

    def get(self, dotted):
        """Read one value by dotted key, e.g. 'train.lr_init'"""
        node = self.config
        for part in dotted.split('.'):
            if not isinstance(node, dict) or part not in node:
                raise ConfigValidationError(f"Unknown configuration key '{dotted}'", field=dotted)
            node = node[part]
        return node

    def set(self, dotted, value):
        """Set one leaf value by dotted key, e.g. 'loss.omega'"""
        parts = dotted.split('.')
        nested = value
        for part in reversed(parts):
            nested = {part: nested}
        self._update_dict(self.config, nested)

    def apply_overrides(self, seed=None, ablate=None, static_margin=None, omega=None, out_dir=None):
        """Apply command-line overrides; every argument left as None keeps the file value"""
        if seed is not None:
            self.set('seed', int(seed))
        if ablate is not None:
            if ablate not in ABLATIONS:
                raise ConfigValidationError(f"Unknown ablation '{ablate}', expected one of {sorted(ABLATIONS)}",
                                            field='ablate')
            for key, value in ABLATIONS[ablate].items():
                self.set(key, value)
        if static_margin is not None:
            self.set('train.static_margin', float(static_margin))
        if omega is not None:
            self.set('loss.omega', float(omega))
        if out_dir is not None:
            self.set('output_dir', out_dir)

    def to_json(self):
        """Canonical JSON text of the settings"""
        return json.dumps(self.config, sort_keys=True, separators=(',', ':'))

    def config_hash(self):
        """SHA-256 of the canonical settings, output_dir excluded"""
        settings = {key: value for key, value in self.config.items() if key != 'output_dir'}
        canonical = json.dumps(settings, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def copy(self):
        clone = ConfigManager()
        clone.config = copy.deepcopy(self.config)
        clone.config_file = self.config_file
        return clone

    def synthetic_config(self):
        data = dict(self.config['data'])
        data['shift_translation'] = tuple(data['shift_translation'] or ())
        return _typed(SyntheticConfig, 'data', seed=self.config['seed'], **data)

    def loss_weights(self):
        return _typed(LossWeights, 'loss', **self.config['loss'])

    def train_config(self, seed_offset=0):
        """Training settings; seed_offset selects one run of a multi-seed experiment"""
        return _typed(TrainConfig, 'train', seed=self.config['seed'] + seed_offset,
                      weights=self.loss_weights(), **self.config['train'])

    def model_specs(self, input_dim, n_known):
        model = self.config['model']
        return _typed(default_specs, 'model', input_dim=input_dim, n_known=n_known,
                      encoder_hidden=tuple(model['encoder_hidden']), generator_width=model['generator_width'],
                      leaky_alpha=model['leaky_alpha'])

    def validate(self):
        """Build every typed view once so bad values surface before any work starts"""
        seed = self.config['seed']
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
            raise ConfigValidationError(f"seed must be an unsigned 64-bit integer, got {seed!r}", field='seed')
        synthetic = self.synthetic_config()
        self.train_config()
        self.model_specs(synthetic.dim, synthetic.n_known)
        level = self.get('general.log_level')
        if level not in LOG_LEVELS:
            raise ConfigValidationError(f"general.log_level must be one of {LOG_LEVELS}, got {level!r}",
                                        field='general.log_level')
        return self
