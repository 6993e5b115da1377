import enum
import re
import typing

import attrs
import cattrs


class TempoFitError(Exception):
    """Base error for the retrofit toolkit."""

    code: str = "tempofit_error"


class ConfigError(TempoFitError, ValueError):
    """Invalid configuration value."""

    code = "config_error"


class DimensionError(TempoFitError, ValueError):
    """Tensor shapes do not line up."""

    code = "dimension_error"


class OrderingError(TempoFitError, ValueError):
    """Timesteps are not strictly increasing where they must be."""

    code = "ordering_error"


class MaskingError(TempoFitError, ValueError):
    """A softmax row was entirely masked out."""

    code = "masking_error"


class ReportWriteError(TempoFitError, OSError):
    """A report or trace file could not be written."""

    code = "report_write_error"


class RetrievalMode(str, enum.Enum):
    """Addressing tensor used to match against cached history keys."""

    K_TO_K = "k_to_k"
    """Current prefix keys address historical keys (native key space)."""
    Q_TO_K = "q_to_k"
    """Current query projections address historical keys (ablation)."""

    def __str__(self) -> str:
        return self.value


class InjectionMode(str, enum.Enum):
    """How retrieved context is fused into the current KV table."""

    RESIDUAL_NORM_PRESERVING = "residual_norm"
    """Residual loading followed by per-token norm restoration."""
    RESIDUAL_PLAIN = "residual_plain"
    """Residual loading only."""
    CONCATENATE = "concatenate"
    """Append history tokens to the attended sequence (ablation)."""

    def __str__(self) -> str:
        return self.value

    @property
    def is_residual(self) -> bool:
        return self is not InjectionMode.CONCATENATE


def default_memory_layers(num_layers: int) -> typing.Tuple[int, ...]:
    """
    Default memory-enabled layer subset: the middle third of the stack.

    For 18 layers this is 6..11, for 6 layers 2..3. Stacks too shallow to have a
    middle third fall back to the single middle layer.

    :param num_layers: Total number of transformer layers.
    :return: Sorted tuple of layer indices.
    """
    layers = tuple(range(num_layers // 3, (2 * num_layers) // 3))
    return layers or (num_layers // 2,)


def alibi_slopes(num_heads: int) -> typing.Tuple[float, ...]:
    """Geometric head-wise slopes m_h = 2^(-8(h+1)/H)."""
    if num_heads < 1:
        raise ConfigError("Number of heads must be at least 1")
    return tuple(2.0 ** (-8.0 * (h + 1) / num_heads) for h in range(num_heads))


@attrs.define(slots=True, frozen=True)
class RopeParams:
    """Rotary position embedding parameters."""

    head_dim: int
    """Per-head dimension (must be even)"""
    base_frequency: float = 10_000.0
    """Base of the inverse-frequency schedule"""

    def __attrs_post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError(f"RoPE head_dim must be even, got {self.head_dim}")
        if self.base_frequency <= 0:
            raise ConfigError("RoPE base frequency must be positive")


@attrs.define(slots=True, frozen=True)
class FgtbParams:
    """Frame-gap temporal bias parameters, resolved for a concrete backbone."""

    beta: float
    """Decay strength (>= 0)"""
    alpha_s: float
    """Frame-gap to token-scale factor (> 0), usually the prefix token count"""
    slopes: typing.Tuple[float, ...]
    """Head-wise slopes, one per attention head"""

    def __attrs_post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"FGTB beta must be non-negative, got {self.beta}")
        if self.alpha_s <= 0:
            raise ConfigError(f"FGTB alpha_s must be positive, got {self.alpha_s}")
        if not self.slopes:
            raise ConfigError("FGTB needs at least one head slope")
        if any(m <= 0 for m in self.slopes):
            raise ConfigError("FGTB slopes must all be positive")

    @property
    def num_heads(self) -> int:
        return len(self.slopes)

    @classmethod
    def for_heads(
        cls, num_heads: int, beta: float = 1.0, alpha_s: float = 1.0
    ) -> "FgtbParams":
        """Build parameters with the default geometric slope schedule."""
        return cls(beta=beta, alpha_s=alpha_s, slopes=alibi_slopes(num_heads))


@attrs.define(slots=True, frozen=True)
class BackboneConfig:
    """Toy transformer backbone definition."""

    num_layers: int = 6
    """Number of transformer layers L"""
    num_heads: int = 4
    """Attention heads per layer H"""
    head_dim: int = 16
    """Per-head dimension d (even, for RoPE)"""
    prefix_tokens: int = 16
    """Prefix (observation) tokens per timestep S"""
    seed: int = 0
    """Seed for weight generation"""
    ffn_multiplier: int = 4
    """Feed-forward hidden width as a multiple of model_dim"""
    action_dim: int = 7
    """Width of the linear action readout"""
    rope_base: float = 10_000.0
    """RoPE base frequency"""

    def __attrs_post_init__(self):
        for name in (
            "num_layers",
            "num_heads",
            "head_dim",
            "prefix_tokens",
            "ffn_multiplier",
            "action_dim",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"Backbone {name} must be at least 1")
        if self.head_dim % 2:
            raise ConfigError(
                f"Backbone head_dim must be even for RoPE, got {self.head_dim}"
            )

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def rope(self) -> RopeParams:
        return RopeParams(head_dim=self.head_dim, base_frequency=self.rope_base)


@attrs.define(slots=True, frozen=True)
class TempoFitConfig:
    """Retrofit hyperparameters."""

    enabled: bool = True
    """Master switch. When off, steps run the memoryless forward"""
    mem_layers: typing.Optional[typing.Tuple[int, ...]] = attrs.field(
        default=None, converter=attrs.converters.optional(tuple)
    )
    """Memory-enabled layer indices. None selects the middle third"""
    capacity: int = 8
    """FIFO capacity C per memory layer"""
    beta: float = 1.0
    """FGTB decay strength"""
    alpha_s: typing.Optional[float] = None
    """Frame-gap to token scale. None uses the prefix token count"""
    slopes: typing.Optional[typing.Tuple[float, ...]] = attrs.field(
        default=None, converter=attrs.converters.optional(tuple)
    )
    """Head slope override. None uses the geometric schedule"""
    retrieval_mode: RetrievalMode = attrs.field(
        default=RetrievalMode.K_TO_K, converter=RetrievalMode
    )
    """Addressing mode for retrieval"""
    injection_mode: InjectionMode = attrs.field(
        default=InjectionMode.RESIDUAL_NORM_PRESERVING, converter=InjectionMode
    )
    """Fusion mode for retrieved context"""
    epsilon: float = 1e-6
    """Denominator guard for norm-preserving rescaling"""
    write_fused: bool = False
    """Store injected K/V instead of the raw projections (residual modes only)"""

    def __attrs_post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"Memory capacity must be at least 1, got {self.capacity}")
        if self.beta < 0:
            raise ConfigError(f"FGTB beta must be non-negative, got {self.beta}")
        if self.alpha_s is not None and self.alpha_s <= 0:
            raise ConfigError(f"FGTB alpha_s must be positive, got {self.alpha_s}")
        if self.epsilon <= 0:
            raise ConfigError(f"Epsilon must be positive, got {self.epsilon}")
        if self.mem_layers is not None and len(set(self.mem_layers)) != len(
            self.mem_layers
        ):
            raise ConfigError(f"Duplicate memory layers in {self.mem_layers}")

    def resolve_layers(self, num_layers: int) -> typing.Tuple[int, ...]:
        """Resolve the memory-enabled layer subset against a backbone depth."""
        if self.mem_layers is None:
            return default_memory_layers(num_layers)
        invalid = [i for i in self.mem_layers if not (0 <= i < num_layers)]
        if invalid:
            raise ConfigError(
                f"Memory layers {invalid} out of range for a {num_layers}-layer backbone"
            )
        return tuple(sorted(self.mem_layers))

    def resolve_fgtb(self, backbone: BackboneConfig) -> FgtbParams:
        """Resolve FGTB parameters (slopes and alpha_s defaults) for a backbone."""
        slopes = self.slopes or alibi_slopes(backbone.num_heads)
        if len(slopes) != backbone.num_heads:
            raise ConfigError(
                f"Expected {backbone.num_heads} head slopes, got {len(slopes)}"
            )
        alpha_s = (
            self.alpha_s if self.alpha_s is not None else float(backbone.prefix_tokens)
        )
        return FgtbParams(beta=self.beta, alpha_s=alpha_s, slopes=tuple(slopes))


@attrs.define(slots=True, frozen=True)
class HarnessConfig:
    """Experiment harness settings."""

    seed: int = 0
    """Seed for synthetic observation streams"""
    episode_length: int = 12
    """Steps per synthetic episode T"""
    alias_step: int = 8
    """Step t* at which both streams observe identical tokens"""
    differing_step: typing.Optional[int] = None
    """Step at which streams differ. None uses alias_step - 1"""
    batch_size: int = 1
    """Batch size B of observation tensors"""
    num_tasks: int = 4
    """Aliasing tasks per ablation suite"""
    capacities: typing.Tuple[int, ...] = attrs.field(
        default=(4, 8, 16, 32), converter=tuple
    )
    """Capacities measured by the efficiency benchmark"""
    stack_sizes: typing.Tuple[int, ...] = attrs.field(default=(4, 8), converter=tuple)
    """Frame-stack sizes measured by the efficiency benchmark"""
    repetitions: int = 30
    """Timed steps per benchmark configuration"""
    warmup: int = 5
    """Discarded warm-up steps per benchmark configuration"""
    workers: int = 1
    """Parallel workers for ablation cells"""

    def __attrs_post_init__(self):
        if not (1 <= self.alias_step < self.episode_length):
            raise ConfigError(
                f"alias_step must satisfy 1 <= t* < T, got t*={self.alias_step}, "
                f"T={self.episode_length}"
            )
        if self.differing_step is not None and not (
            0 <= self.differing_step < self.alias_step
        ):
            raise ConfigError(
                f"differing_step must satisfy 0 <= step < t*, got {self.differing_step}"
            )
        if self.repetitions < 10:
            raise ConfigError("Benchmarks need at least 10 repetitions")
        if self.warmup < 0:
            raise ConfigError("warmup must be non-negative")
        if self.batch_size < 1 or self.num_tasks < 1 or self.workers < 1:
            raise ConfigError("batch_size, num_tasks and workers must be at least 1")


converter = cattrs.Converter()


EventCallback = typing.Callable[[str, typing.Any], None]


class EventSubscription:
    """Represents a subscription to an event or events with pattern matching."""

    def __init__(self, event: str, callback: EventCallback):
        """
        Initialize event subscription.

        :param event: Event pattern or regex to match ("*" for all, "stream.*"
            for prefix, or an exact event name)
        :param callback: Callback function to execute when event matches
        """
        self.event = event
        self.callback = callback
        self._is_wildcard = event == "*"
        self._is_prefix = event.endswith("*") and not self._is_wildcard
        self._prefix = event[:-1] if self._is_prefix else None
        self._is_regex = False

        # Event names are dotted, so a bare prefix pattern must not be treated as regex
        if not self._is_prefix and any(
            char in event for char in r"[](){}+?^$|\\"
        ) and not event == "*":
            self._is_regex = True
            try:
                self._regex = re.compile(event)
            except re.error:
                self._is_regex = False

    def matches(self, event: str) -> bool:
        """Check if the event matches this subscription's event pattern."""
        if self._is_wildcard:
            return True
        if self._is_regex:
            return bool(self._regex.match(event))
        if self._is_prefix:
            return event.startswith(self._prefix)  # type: ignore[arg-type]
        return event == self.event


class LoggerLike(typing.Protocol):
    """A protocol for logging objects that support various logging methods."""

    def log(self, *args: typing.Any, **kwargs: typing.Any) -> None: ...
    def debug(self, *args: typing.Any, **kwargs: typing.Any) -> None: ...
    def info(self, *args: typing.Any, **kwargs: typing.Any) -> None: ...
    def warning(self, *args: typing.Any, **kwargs: typing.Any) -> None: ...
    def error(self, *args: typing.Any, **kwargs: typing.Any) -> None: ...
    def critical(self, *args: typing.Any, **kwargs: typing.Any) -> None: ...
    def exception(
        self, *args: typing.Any, exc_info: bool = True, **kwargs: typing.Any
    ) -> None: ...
