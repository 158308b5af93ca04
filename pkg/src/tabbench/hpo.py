"""Published search spaces, a univariate TPE sampler and the trial/time budget."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri

from tabbench import kernels


class ConfigurationError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str  # "int" | "float" | "categorical"
    low: float | None = None
    high: float | None = None
    log_scale: bool = False
    choices: tuple = ()

    def __post_init__(self):
        if self.kind in ("int", "float"):
            # ints are padded by 0.5 on each side, so a single value is a valid range
            if not (self.low < self.high or (self.kind == "int" and self.low == self.high)):
                raise ConfigurationError(f"{self.name}: low must be < high")
            if self.log_scale and self.low <= 0:
                raise ConfigurationError(f"{self.name}: log scale needs low > 0")
        elif self.kind == "categorical":
            if not self.choices or len(set(self.choices)) != len(self.choices):
                raise ConfigurationError(f"{self.name}: choices must be non-empty and unique")
        else:
            raise ConfigurationError(f"{self.name}: unknown kind {self.kind!r}")

    # internal (modelling) coordinates: log for log-scale, +-0.5 padding for ints
    def bounds(self) -> tuple[float, float]:
        lo, hi = float(self.low), float(self.high)
        if self.kind == "int":
            lo, hi = lo - 0.5, hi + 0.5
        if self.log_scale:
            lo, hi = math.log(lo), math.log(hi)
        return lo, hi

    def to_internal(self, value) -> float:
        v = float(value)
        return math.log(v) if self.log_scale else v

    def from_internal(self, u: float):
        v = math.exp(u) if self.log_scale else u
        if self.kind == "int":
            return int(min(max(round(v), self.low), self.high))
        return float(min(max(v, self.low), self.high))

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        if self.kind == "int" and (isinstance(value, bool) or int(value) != value):
            return False
        return self.low <= value <= self.high

    def midpoint(self):
        if self.kind == "categorical":
            return self.choices[len(self.choices) // 2]
        lo, hi = float(self.low), float(self.high)
        mid = math.sqrt(lo * hi) if self.log_scale else (lo + hi) / 2
        return int(math.floor(mid + 0.5)) if self.kind == "int" else mid


@dataclass(frozen=True)
class SearchSpace:
    model: str
    params: tuple[ParamSpec, ...]

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigurationError("parameter names must be unique")

    def __iter__(self):
        return iter(self.params)

    def __getitem__(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def validate(self, config: dict):
        if set(config) != set(self.names()):
            raise ValidationError(f"config keys {sorted(config)} do not match space {self.names()}")
        for p in self.params:
            if not p.contains(config[p.name]):
                raise ValidationError(f"{p.name}={config[p.name]!r} outside its range")

    def narrowed(self, overrides: dict) -> "SearchSpace":
        """Copy with some numeric ranges (``[low, high]``) or choice lists replaced."""
        unknown = set(overrides) - set(self.names())
        if unknown:
            raise ConfigurationError(f"unknown parameters in override: {sorted(unknown)}")
        new = []
        for p in self.params:
            if p.name not in overrides:
                new.append(p)
            elif p.kind == "categorical":
                new.append(replace(p, choices=tuple(overrides[p.name])))
            else:
                lo, hi = overrides[p.name]
                new.append(replace(p, low=type(p.low)(lo), high=type(p.high)(hi)))
        return SearchSpace(self.model, tuple(new))


_RESNET_PARAMS = (
    ParamSpec("n_layers", "int", 1, 8),
    ParamSpec("layer_size", "int", 64, 1024),
    ParamSpec("learning_rate", "float", 1e-5, 1e-2, log_scale=True),
    ParamSpec("weight_decay", "float", 1e-6, 1e-3, log_scale=True),
    ParamSpec("residual_dropout", "float", 0.0, 0.5),
    ParamSpec("hidden_dropout", "float", 0.0, 0.5),
    ParamSpec("d_embedding", "int", 64, 512),
    ParamSpec("d_hidden_factor", "float", 1.0, 4.0),
)

SPACES = {
    "resnext": SearchSpace(
        "resnext", _RESNET_PARAMS + (ParamSpec("cardinality", "categorical", choices=(2, 4, 8, 16, 32)),)
    ),
    "resnet": SearchSpace("resnet", _RESNET_PARAMS),
    "ft": SearchSpace(
        "ft",
        (
            ParamSpec("n_layers", "int", 1, 6),
            ParamSpec("d_token", "int", 64, 512),
            ParamSpec("residual_dropout", "float", 0.0, 0.2),
            ParamSpec("attn_dropout", "float", 0.0, 0.5),
            ParamSpec("ffn_dropout", "float", 0.0, 0.5),
            ParamSpec("d_ffn_factor", "float", 2 / 3, 8 / 3),
            ParamSpec("learning_rate", "float", 1e-5, 1e-3, log_scale=True),
            ParamSpec("weight_decay", "float", 1e-6, 1e-3, log_scale=True),
        ),
    ),
}

# FT-Transformer's published defaults; clamped into narrowed spaces
FT_DEFAULTS = {
    "n_layers": 3,
    "d_token": 192,
    "residual_dropout": 0.0,
    "attn_dropout": 0.2,
    "ffn_dropout": 0.1,
    "d_ffn_factor": 4 / 3,
    "learning_rate": 1e-4,
    "weight_decay": 1e-5,
}


def space_for(tag: str) -> SearchSpace:
    if tag not in SPACES:
        raise ConfigurationError(f"unknown model tag {tag!r}; expected one of {sorted(SPACES)}")
    return SPACES[tag]


def default_config(tag: str, space: SearchSpace | None = None) -> dict:
    """Range midpoints (geometric for log-scale); FT uses its published defaults."""
    space = space or space_for(tag)
    if tag == "ft":
        out = {}
        for p in space:
            v = FT_DEFAULTS[p.name]
            out[p.name] = type(p.low)(min(max(v, p.low), p.high))
        return out
    return {p.name: p.midpoint() for p in space}


@dataclass
class Trial:
    config: dict
    objective: float | None
    status: str = "complete"  # "complete" | "failed"
    duration: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status == "failed":
            self.objective = None
        elif self.status != "complete":
            raise ValidationError(f"unknown trial status {self.status!r}")
        elif self.objective is None or not math.isfinite(self.objective):
            raise ValidationError("complete trials need a finite objective")


@dataclass
class StudyState:
    space: SearchSpace
    seed: int = 0
    n_startup: int = 10
    gamma_fraction: float = 0.25
    n_candidates: int = 24
    history: list[Trial] = field(default_factory=list)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    @property
    def completed(self) -> list[Trial]:
        return [t for t in self.history if t.status == "complete"]


@dataclass(frozen=True)
class Budget:
    max_trials: int = 100
    max_wall_clock: float = 23 * 3600.0

    def __post_init__(self):
        if self.max_trials < 1 or not self.max_wall_clock > 0:
            raise ConfigurationError("budget limits must be positive")


def budget_exhausted(state: StudyState, budget: Budget, elapsed: float) -> bool:
    return len(state.history) >= budget.max_trials or elapsed >= budget.max_wall_clock


def record(state: StudyState, trial: Trial) -> StudyState:
    state.space.validate(trial.config)
    state.history.append(trial)
    return state


# ----------------------------------------------------------------- sampling

def _sample_uniform(spec: ParamSpec, rng):
    if spec.kind == "categorical":
        return spec.choices[int(rng.integers(len(spec.choices)))]
    lo, hi = spec.bounds()
    return spec.from_internal(rng.uniform(lo, hi))


@dataclass
class _Parzen:
    """Truncated-Gaussian mixture with a wide prior component at the centre."""

    mus: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray
    low: float
    high: float

    @classmethod
    def fit(cls, obs: np.ndarray, low: float, high: float) -> "_Parzen":
        span = high - low
        n = obs.shape[0]
        if n > 1:
            spread = float(np.std(obs))
            # linear-interpolated quartiles, as np.percentile computes them but without its overhead
            q25, q75 = np.interp((0.25 * (n - 1), 0.75 * (n - 1)), np.arange(n), np.sort(obs))
            if q75 > q25:
                spread = min(spread, (q75 - q25) / 1.34)
            bw = 1.06 * spread * (n + 1) ** -0.2
        else:
            bw = 0.0
        # Silverman width, clipped to a range-scaled window
        bw = min(max(bw, span / min(100.0, n + 1.0)), span)
        mus = np.append(obs, 0.5 * (low + high))
        sigmas = np.append(np.full(n, bw), span)
        weights = np.full(n + 1, 1.0 / (n + 1))
        return cls(mus, sigmas, weights, low, high)

    def sample(self, rng, size: int) -> np.ndarray:
        comp = rng.choice(self.mus.shape[0], size=size, p=self.weights)
        mu, sd = self.mus[comp], self.sigmas[comp]
        a, b = ndtr((self.low - mu) / sd), ndtr((self.high - mu) / sd)
        u = a + rng.uniform(size=size) * (b - a)
        x = mu + sd * ndtri(np.clip(u, 1e-300, 1 - 1e-16))
        return np.clip(x, self.low, self.high)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return kernels.parzen_logpdf(x, self.mus, self.sigmas, self.weights, self.low, self.high)


def _categorical_probs(spec: ParamSpec, values) -> np.ndarray:
    counts = np.ones(len(spec.choices))  # Dirichlet prior: one pseudo-count per choice
    index = {c: i for i, c in enumerate(spec.choices)}
    for v in values:
        if v in index:
            counts[index[v]] += 1
    return counts / counts.sum()


def split_good_bad(trials: list[Trial], gamma_fraction: float) -> tuple[list[Trial], list[Trial]]:
    """Best ``ceil(gamma * n)`` trials by objective (earlier wins ties) vs the rest."""
    order = sorted(range(len(trials)), key=lambda i: (-trials[i].objective, i))
    n_good = max(1, math.ceil(gamma_fraction * len(trials)))
    good = [trials[i] for i in order[:n_good]]
    bad = [trials[i] for i in order[n_good:]]
    return good, bad


def suggest(state: StudyState, space: SearchSpace | None = None) -> dict:
    space = space or state.space
    rng = state.rng
    done = state.completed
    if len(done) < state.n_startup:
        return {p.name: _sample_uniform(p, rng) for p in space}

    good, bad = split_good_bad(done, state.gamma_fraction)
    n_cand = state.n_candidates
    candidates: dict[str, list] = {}
    score = np.zeros(n_cand)
    for p in space:
        if p.kind == "categorical":
            pg = _categorical_probs(p, [t.config[p.name] for t in good])
            pb = _categorical_probs(p, [t.config[p.name] for t in bad])
            picks = rng.choice(len(p.choices), size=n_cand, p=pg)
            candidates[p.name] = [p.choices[i] for i in picks]
            score += np.log(pg[picks]) - np.log(pb[picks])
        else:
            lo, hi = p.bounds()
            obs_good = np.array([p.to_internal(t.config[p.name]) for t in good])
            obs_bad = np.array([p.to_internal(t.config[p.name]) for t in bad])
            lg = _Parzen.fit(obs_good, lo, hi)
            lb = _Parzen.fit(obs_bad, lo, hi)
            xs = lg.sample(rng, n_cand)
            candidates[p.name] = xs
            score += lg.logpdf(xs) - lb.logpdf(xs)
    best = int(np.argmax(score))
    out = {}
    for p in space:
        pick = candidates[p.name][best]
        out[p.name] = pick if p.kind == "categorical" else p.from_internal(pick)
    return out


def random_suggest(space: SearchSpace, rng) -> dict:
    return {p.name: _sample_uniform(p, rng) for p in space}
