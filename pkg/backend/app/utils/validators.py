from backend.app.ml.pseudo_label import THRESHOLD_SCOPES
from backend.app.services.selection_service import STRATEGIES, parse_rounds
from backend.app.utils.error_handlers import ConfigError

SECTIONS = ('synth', 'loop', 'train', 'paths', 'seed', 'threads')

SYNTH_KEYS = (
    'classes', 'feature_dim', 'height', 'width', 'patches', 'separation', 'shift',
    'skew', 'noise', 'n_source', 'n_target', 'n_eval',
)
LOOP_KEYS = (
    'rounds', 'pretrain_epochs', 'warmup', 'source_free', 'strategy', 'score_with', 'evaluate_with',
    'random_first_round', 'final_retrain', 'reinit_between_rounds',
)
TRAIN_KEYS = (
    'epochs', 'batch_size', 'lambda_u', 'lambda_c', 'omega', 'alpha0', 'threshold_scope',
    'ema_momentum', 'learning_rate', 'momentum', 'weight_decay', 'anchors', 'negatives', 'embed_dim',
)
PATH_KEYS = ('source', 'target', 'ground_truth', 'eval', 'classes', 'out', 'inbox')

_POSITIVE_INTS = {
    'synth': ('classes', 'feature_dim', 'height', 'width', 'patches'),
    'train': ('epochs', 'batch_size', 'anchors', 'negatives', 'embed_dim'),
    'loop': ('pretrain_epochs',),
}
_NON_NEGATIVE_INTS = {'synth': ('n_source', 'n_target', 'n_eval')}
_BOOLEANS = ('source_free', 'warmup', 'random_first_round', 'final_retrain', 'reinit_between_rounds')


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_run_config(data):
    """
    Validate a run configuration document
    Unknown keys are errors; values are range checked
    """
    errors = {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        return {'valid': False, 'errors': {'config': 'configuration must be a mapping'}}
    # unset values fall back to the defaults
    data = {
        key: ({k: v for k, v in value.items() if v is not None} if isinstance(value, dict) else value)
        for key, value in data.items()
        if value is not None
    }

    for key in data:
        if key not in SECTIONS:
            errors[key] = f"unknown section '{key}'"

    allowed = {'synth': SYNTH_KEYS, 'loop': LOOP_KEYS, 'train': TRAIN_KEYS, 'paths': PATH_KEYS}
    for section, keys in allowed.items():
        values = data.get(section)
        if values is None:
            continue
        if not isinstance(values, dict):
            errors[section] = f"'{section}' must be a mapping"
            continue
        for key in values:
            if key not in keys:
                errors[f"{section}.{key}"] = f"unknown key '{key}'"

    # Integer validation
    for section, keys in _POSITIVE_INTS.items():
        values = data.get(section) or {}
        for key in keys:
            if key in values and values[key] is not None and (not _is_int(values[key]) or values[key] < 1):
                errors[f"{section}.{key}"] = f"{key} must be an integer >= 1"
    for section, keys in _NON_NEGATIVE_INTS.items():
        values = data.get(section) or {}
        for key in keys:
            if key in values and (not _is_int(values[key]) or values[key] < 0):
                errors[f"{section}.{key}"] = f"{key} must be an integer >= 0"
    synth = data.get('synth') or {}
    if _is_int(synth.get('classes')) and synth['classes'] < 2:
        errors['synth.classes'] = "at least 2 classes are required"
    for key in ('separation', 'noise'):
        if key in synth and (not _is_number(synth[key]) or synth[key] <= 0):
            errors[f"synth.{key}"] = f"{key} must be positive"
    for key in ('shift', 'skew'):
        if key in synth and (not _is_number(synth[key]) or synth[key] < 0):
            errors[f"synth.{key}"] = f"{key} must be non-negative"

    # Training hyperparameters
    train = data.get('train') or {}
    for key in ('lambda_u', 'lambda_c', 'weight_decay'):
        if key in train and (not _is_number(train[key]) or train[key] < 0):
            errors[f"train.{key}"] = f"{key} must be a non-negative number"
    for key in ('omega', 'learning_rate'):
        if key in train and (not _is_number(train[key]) or train[key] <= 0):
            errors[f"train.{key}"] = f"{key} must be positive"
    if 'alpha0' in train and (not _is_number(train['alpha0']) or not 0 < train['alpha0'] <= 1):
        errors['train.alpha0'] = "alpha0 must be in (0, 1]"
    if 'ema_momentum' in train and (not _is_number(train['ema_momentum']) or not 0 <= train['ema_momentum'] <= 1):
        errors['train.ema_momentum'] = "ema_momentum must be in [0, 1]"
    if 'momentum' in train and (not _is_number(train['momentum']) or not 0 <= train['momentum'] < 1):
        errors['train.momentum'] = "momentum must be in [0, 1)"
    if 'threshold_scope' in train and train['threshold_scope'] not in THRESHOLD_SCOPES:
        errors['train.threshold_scope'] = f"threshold_scope must be one of {', '.join(THRESHOLD_SCOPES)}"

    # Loop options
    loop = data.get('loop') or {}
    if 'rounds' in loop:
        try:
            parse_rounds(loop['rounds'])
        except ConfigError as e:
            errors['loop.rounds'] = str(e)
    if 'strategy' in loop and loop['strategy'] not in STRATEGIES:
        errors['loop.strategy'] = f"strategy must be one of {', '.join(STRATEGIES)}"
    for key in ('score_with', 'evaluate_with'):
        if key in loop and loop[key] not in ('teacher', 'student'):
            errors[f"loop.{key}"] = f"{key} must be 'teacher' or 'student'"
    for key in _BOOLEANS:
        if key in loop and not isinstance(loop[key], bool):
            errors[f"loop.{key}"] = f"{key} must be true or false"

    for key in ('seed', 'threads'):
        if key in data and (not _is_int(data[key]) or data[key] < (0 if key == 'seed' else 1)):
            errors[key] = f"{key} must be a {'non-negative' if key == 'seed' else 'positive'} integer"

    return {
        'valid': len(errors) == 0,
        'errors': errors
    }


def require_valid_run_config(data):
    """Raise ConfigError listing every problem when the document is invalid."""
    result = validate_run_config(data)
    if not result['valid']:
        raise ConfigError("invalid run configuration", result['errors'])
    return data
