import inspect
from functools import wraps

from .schema import validate


def protected(validation_dic):
    """Validate the keyword arguments of the wrapped function.

    Positional arguments are bound to their parameter names first; the
    validated (defaulted, cast) values are what the function receives."""
    def decorator(func):
        signature = inspect.signature(func)

        @wraps(func)
        def wrapper(*args, **kwargs):
            bound = signature.bind_partial(*args, **kwargs)
            checked = {k: v for k, v in bound.arguments.items() if k in validation_dic}
            passthrough = {k: v for k, v in bound.arguments.items() if k not in validation_dic}
            return func(**passthrough, **validate(checked, validation_dic))
        return wrapper
    return decorator
