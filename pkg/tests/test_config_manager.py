import json

import pytest

from openset_margin.config_manager import ABLATIONS, DEFAULT_CONFIG, ConfigManager
from openset_margin.errors import ConfigValidationError


def _write(tmp_path, document, name='config.json'):
    path = tmp_path / name
    path.write_text(json.dumps(document))
    return str(path)


def test_defaults_validate():
    manager = ConfigManager().validate()
    assert manager.config == DEFAULT_CONFIG
    assert manager.config is not DEFAULT_CONFIG


def test_file_values_merge_over_defaults(tmp_path):
    manager = ConfigManager(_write(tmp_path, {'loss': {'omega': 1.5}, 'seed': 9}))
    assert manager.get('loss.omega') == 1.5
    assert manager.get('loss.lambda_s') == DEFAULT_CONFIG['loss']['lambda_s']
    assert manager.train_config().seed == 9


def test_unknown_key_is_rejected_with_its_dotted_name(tmp_path):
    with pytest.raises(ConfigValidationError) as excinfo:
        ConfigManager(_write(tmp_path, {'data': {'bogus': 1}}))
    assert excinfo.value.field == 'data.bogus'


def test_section_must_be_an_object(tmp_path):
    with pytest.raises(ConfigValidationError) as excinfo:
        ConfigManager(_write(tmp_path, {'train': 3}))
    assert excinfo.value.field == 'train'


def test_missing_or_invalid_file(tmp_path):
    with pytest.raises(ConfigValidationError):
        ConfigManager(str(tmp_path / 'missing.json'))
    bad = tmp_path / 'bad.json'
    bad.write_text('{')
    with pytest.raises(ConfigValidationError):
        ConfigManager(str(bad))


@pytest.mark.parametrize('key, value, field', [
    ('data.unknown_ratio', 1.5, 'data.unknown_ratio'),
    ('train.epochs_stage1', 0, 'train.epochs_stage1'),
    ('loss.omega', -0.5, 'loss.omega'),
    ('model.generator_width', 0, 'model.layer_widths'),
    ('general.log_level', 'LOUD', 'general.log_level'),
    ('seed', -3, 'seed'),
])
def test_validation_names_the_field(key, value, field):
    manager = ConfigManager()
    manager.set(key, value)
    with pytest.raises(ConfigValidationError) as excinfo:
        manager.validate()
    assert excinfo.value.field == field


def test_ablation_flags(tmp_path):
    for name, settings in ABLATIONS.items():
        manager = ConfigManager()
        manager.apply_overrides(ablate=name)
        for key, value in settings.items():
            assert manager.get(key) == value
    manager = ConfigManager()
    manager.apply_overrides(ablate='no-sca')
    weights = manager.train_config().effective_weights()
    assert (weights.lambda_s, weights.lambda_c) == (0.0, 0.0)


def test_unknown_ablation_is_rejected():
    with pytest.raises(ConfigValidationError):
        ConfigManager().apply_overrides(ablate='no-everything')


def test_flags_win_over_file(tmp_path):
    manager = ConfigManager(_write(tmp_path, {'loss': {'omega': 1.5}, 'seed': 9}))
    manager.apply_overrides(seed=2, omega=0.1, static_margin=20, out_dir='runs/x')
    assert manager.get('seed') == 2
    assert manager.get('loss.omega') == 0.1
    assert manager.train_config().static_margin == 20.0
    assert manager.get('output_dir') == 'runs/x'


def test_config_hash_ignores_output_dir_only():
    manager = ConfigManager()
    baseline = manager.config_hash()
    manager.set('output_dir', 'elsewhere')
    assert manager.config_hash() == baseline
    manager.set('loss.omega', 2.0)
    assert manager.config_hash() != baseline


def test_manifest_reproduces_the_config(tmp_path):
    manager = ConfigManager()
    manager.apply_overrides(seed=5, omega=1.0)
    manifest = _write(tmp_path, {'command': 'generate', 'config': manager.config}, 'manifest.json')
    assert ConfigManager.from_manifest(manifest).config_hash() == manager.config_hash()


def test_unreadable_manifest(tmp_path):
    with pytest.raises(ConfigValidationError):
        ConfigManager.from_manifest(_write(tmp_path, {'command': 'generate'}, 'manifest.json'))


def test_save_and_reload(tmp_path):
    manager = ConfigManager()
    manager.set('data.dim', 6)
    path = str(tmp_path / 'nested' / 'saved.json')
    manager.save_config(path)
    assert ConfigManager(path).config == manager.config


def test_copy_is_independent():
    manager = ConfigManager()
    clone = manager.copy()
    clone.set('data.n_known', 6)
    assert manager.get('data.n_known') == DEFAULT_CONFIG['data']['n_known']


def test_typed_views():
    manager = ConfigManager()
    synthetic = manager.synthetic_config()
    assert synthetic.seed == 0 and synthetic.shift_translation == ()
    specs = manager.model_specs(synthetic.dim, synthetic.n_known)
    assert specs.encoder.layer_widths == (8, 32, 16)
    assert manager.train_config(seed_offset=2).seed == 2
