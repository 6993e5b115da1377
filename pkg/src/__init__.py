from . import types  # noqa
from .storages import *  # noqa
