from .tasks import *  # noqa
from .ablation import *  # noqa
from .bench import *  # noqa
from .trace import *  # noqa
from .reports import *  # noqa
