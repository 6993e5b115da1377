from .core import * # noqa
