"""Adam, SGD (optionally Nesterov) and RMSprop, plus learning-rate stepping."""

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericError

ALGOS = ("adam", "sgd", "rmsprop")


@dataclass(frozen=True)
class OptimizerConfig:
    algo: str = "adam"
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = None
    momentum: float = 0.0
    nesterov: bool = False
    rho: float = 0.9
    l2: float = 0.0
    lr_floor: float = 1e-6

    def __post_init__(self):
        algo = self.algo.lower()
        if algo not in ALGOS:
            raise ConfigError(f"unknown optimizer {self.algo!r}; choose from {ALGOS}")
        object.__setattr__(self, "algo", algo)
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", 1e-8 if algo == "adam" else 1e-7)
        # lr == 0 is allowed: it turns a step into a no-op, which ablations use.
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        if self.l2 < 0:
            raise ConfigError("l2 must be non-negative")
        if self.lr_floor < 0:
            raise ConfigError("lr_floor must be non-negative")

    @classmethod
    def preset(cls, algo, **overrides):
        """Default hyperparameters for each algorithm, with ``overrides`` applied."""
        presets = {
            "adam": dict(algo="adam", lr=1e-5, beta1=0.9, beta2=0.999, epsilon=1e-8),
            "sgd": dict(algo="sgd", lr=1e-4, momentum=0.9, nesterov=True),
            "rmsprop": dict(algo="rmsprop", lr=1e-5, rho=0.9),
        }
        try:
            params = dict(presets[algo.lower()])
        except KeyError:
            raise ConfigError(f"unknown optimizer {algo!r}; choose from {ALGOS}") from None
        params.update(overrides)
        return cls(**params)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class OptimizerState:
    """Slot arrays per parameter name plus the step counter."""

    slots: dict = field(default_factory=dict)
    t: int = 0

    def copy(self):
        return OptimizerState({n: {k: v.copy() for k, v in s.items()} for n, s in self.slots.items()}, self.t)


def _check_finite(name, g):
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient for parameter {name}")


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam, in place on the arrays in ``params``."""
    for name, g in grads.items():
        _check_finite(name, g)
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, g in grads.items():
        p = params[name]
        slot = state.slots.setdefault(name, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
        slot["m"] = b1 * slot["m"] + (1 - b1) * g
        slot["v"] = b2 * slot["v"] + (1 - b2) * g * g
        m_hat = slot["m"] / c1
        v_hat = slot["v"] / c2
        p -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype)


def sgd_step(params, grads, state, cfg):
    """Momentum SGD: v <- mu*v - lr*g; Nesterov applies p += mu*v - lr*g, else p += v."""
    for name, g in grads.items():
        _check_finite(name, g)
    state.t += 1
    mu = cfg.momentum
    for name, g in grads.items():
        p = params[name]
        if mu == 0:
            p -= (cfg.lr * g).astype(p.dtype)
            continue
        slot = state.slots.setdefault(name, {"velocity": np.zeros_like(p)})
        slot["velocity"] = mu * slot["velocity"] - cfg.lr * g
        if cfg.nesterov:
            p += (mu * slot["velocity"] - cfg.lr * g).astype(p.dtype)
        else:
            p += slot["velocity"].astype(p.dtype)


def rmsprop_step(params, grads, state, cfg):
    for name, g in grads.items():
        _check_finite(name, g)
    state.t += 1
    rho = cfg.rho
    for name, g in grads.items():
        p = params[name]
        slot = state.slots.setdefault(name, {"mean_square": np.zeros_like(p)})
        slot["mean_square"] = rho * slot["mean_square"] + (1 - rho) * g * g
        p -= (cfg.lr * g / (np.sqrt(slot["mean_square"]) + cfg.epsilon)).astype(p.dtype)


STEP_FUNCTIONS = {"adam": adam_step, "sgd": sgd_step, "rmsprop": rmsprop_step}


class Optimizer:
    """Applies one of the step rules to (name, Tensor) pairs using their ``.grad``."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.state = OptimizerState()
        self._step = STEP_FUNCTIONS[cfg.algo]

    @property
    def lr(self):
        return self.cfg.lr

    def step(self, named_params, extra_grads=None):
        params, grads = {}, {}
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            if extra_grads and name in extra_grads:
                g = g + extra_grads[name]
            params[name] = p.data
            grads[name] = g
        if grads:
            self._step(params, grads, self.state, self.cfg)

    def step_lr_down(self, factor=10.0):
        self.cfg = step_lr_down(self.cfg, factor)
        return self.cfg.lr

    def state_dict(self):
        return {"cfg": self.cfg.to_dict(), "state": self.state.copy()}

    def load_state_dict(self, d):
        self.cfg = OptimizerConfig.from_dict(d["cfg"])
        self._step = STEP_FUNCTIONS[self.cfg.algo]
        self.state = d["state"].copy()


def step_lr_down(cfg, factor=10.0):
    """Divide the learning rate by ``factor``, never going below ``cfg.lr_floor``."""
    if not factor > 1:
        raise ConfigError(f"learning-rate factor must be > 1, got {factor}")
    if cfg.lr <= cfg.lr_floor or math.isclose(cfg.lr, cfg.lr_floor, rel_tol=1e-12):
        warnings.warn(f"learning rate already at its floor {cfg.lr_floor:g}; not reduced", stacklevel=2)
        return cfg
    new_lr = cfg.lr / factor
    if new_lr < cfg.lr_floor:
        warnings.warn(f"learning rate {new_lr:g} clamped to floor {cfg.lr_floor:g}", stacklevel=2)
        new_lr = cfg.lr_floor
    return replace(cfg, lr=new_lr)


def l2_gradients(named_params, l2):
    """Gradient of ``l2 * sum(kernel**2)`` for every kernel in ``named_params``."""
    if l2 == 0:
        return {}
    return {name: 2 * l2 * p.data for name, p in named_params if name.endswith("/kernel")}
