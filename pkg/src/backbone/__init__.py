from .core import * # noqa
from .manage import * # noqa
