"""Dictionary validation against counter dictionaries.

A counter dictionary maps every allowed key to a rule: the name of a
registered validator under ``type``, that validator's keyword arguments, and
any of the structural flags in ``RULE_FLAGS``. Errors raised below the top
level are prefixed with the dotted location of the entry, for example
``at optimizer.m.flow0.W0: ...``.
"""
from .validations import registered_functions
from .transformations import registered_transformation
from .exceptions import Invalid

NESTED = "nested"
TYPELIST = "list"
VALIDATOR = "type"
OPTIONAL = "optional"
NULLABLE = "null_able"
TYPEASOARR = "aso_array"
DEFAULT = "default"
TRANSFORM = "transform"
PRETRANSFORM = "pre_transform"

RULE_FLAGS = frozenset({VALIDATOR, NESTED, TYPELIST, TYPEASOARR, NULLABLE, OPTIONAL, DEFAULT, PRETRANSFORM,
                        TRANSFORM})


def _unchanged(val):
    return val


def _registered(registry, name, kind):
    try:
        return registry[name]
    except (KeyError, TypeError):
        raise Invalid(f"{name} is not registered as {kind}")


def _checker(key, rule):
    validator = _registered(registered_functions, rule.get(VALIDATOR), 'type')
    arguments = {k: v for k, v in rule.items() if k not in RULE_FLAGS}
    return lambda val: validator(key=key, val=val, **arguments)


def _transformation(rule, flag):
    name = rule.get(flag)
    return _unchanged if name is None else _registered(registered_transformation, name, 'transformation')


def _check_keys(input_dict, counter_dict):
    if not isinstance(input_dict, dict):
        raise Invalid(f"{input_dict} not a dictionary but is of type {type(input_dict).__name__}")
    unknown = set(input_dict) - set(counter_dict)
    if unknown:
        raise Invalid(f"invalid keys: {', '.join(sorted(map(str, unknown)))} "
                      f":expected keys: {', '.join(counter_dict)}")


def _descend(doc, counter_dict, where):
    """Validate a nested document, prefixing any error with its location."""
    try:
        return validate(doc, counter_dict)
    except Invalid as exc:
        path = [where] + getattr(exc, 'path', [])
        reason = getattr(exc, 'reason', str(exc))
        located = type(exc)(f"at {'.'.join(path)}: {reason}")
        located.path, located.reason = path, reason
        raise located from None


def _each(key, values, check):
    if not isinstance(values, (list, tuple)):
        raise Invalid(f'key: "{key}" contains invalid item "{values}" with type "{type(values).__name__}": '
                      f'not of type list')
    return [check(val) for val in values]


def _validate_entry(key, val, rule):
    check = _checker(key, rule)
    before, after = _transformation(rule, PRETRANSFORM), _transformation(rule, TRANSFORM)

    if NESTED not in rule:
        return after(check(before(val)))

    # list of plain values, each checked by the item's validator
    if rule.get(TYPELIST):
        return _each(key, val, lambda item: after(check(before(item))))

    check(val)
    nested = rule[NESTED]
    # associative array: arbitrary keys (parameter names), one schema for every value
    if rule.get(TYPEASOARR):
        return {name: _descend(doc, nested, f"{key}.{name}") for name, doc in val.items()}

    return after(_descend(before(val), nested, key))


def validate(input_dict, counter_dict):
    """Validate ``input_dict`` against ``counter_dict`` and return a new dictionary.

    Unknown keys are rejected, defaults are filled in, ``null_able`` entries
    may be ``None`` and pre/post transformations registered in
    ``registered_transformation`` are applied around each validator."""
    _check_keys(input_dict, counter_dict)

    validated_items = {}
    for key, rule in counter_dict.items():
        if key not in input_dict:
            if DEFAULT in rule:
                validated_items[key] = rule[DEFAULT]
            elif not rule.get(OPTIONAL):
                raise Invalid(f'key:"{key}" is not set')
            continue

        val = input_dict[key]
        if val is None and rule.get(NULLABLE):
            validated_items[key] = None
            continue
        validated_items[key] = _validate_entry(key, val, rule)

    return validated_items
