"""Pipeline configuration loaded from a TOML file.

Every section maps onto a frozen dataclass; unknown sections or keys raise
:class:`~neurojump.errors.ConfigError` so typos fail before any work starts.
Per-stage seeds derive from the global seed by hashing the stage name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import ConfigError


@dataclass(frozen=True)
class RunSection:
    seed: int = 7
    out_dir: str = "runs/demo"
    n_assets: int = 3
    train_fraction: float = 0.6
    threads: int = 1


@dataclass(frozen=True)
class DataSection:
    """Optional external inputs; when ``daily_csv`` is set simulation is skipped."""

    daily_csv: tuple = ()
    intraday_csv: tuple = ()


@dataclass(frozen=True)
class SimulateSection:
    n_days: int = 2000
    intraday_steps: int = 78
    jump_family: str = "gmm"
    jump_params: tuple = (0.5, -0.03, 0.03, 0.01, 0.01)
    drift: float = 0.05
    vol_base: float = 0.16
    vol_slope: float = 0.05
    lam_low: float = 12.6
    lam_high: float = 100.8
    persistence: float = 0.95
    state_noise: float = 0.3


@dataclass(frozen=True)
class FeaturesSection:
    pe_embed: int = 3
    pe_delay: int = 1
    rqa_embed: int = 3
    rqa_delay: int = 1
    rqa_target_rr: float = 0.03
    rqa_lmin: int = 2
    window: int = 126
    zscore_window: int = 252
    winsor: float = 0.01
    n_lags: int = 5
    vol_window: int = 21


@dataclass(frozen=True)
class NetworkSection:
    encoder_layers: tuple = (32, 32)
    head_hidden: int = 16
    dropout_rate: float = 0.0
    jump_family: str = "gmm"
    lam_bounds: tuple = ()  # empty: min(0.5 * days, 1.5) per horizon


@dataclass(frozen=True)
class TrainSection:
    gamma_tv: float = 1e-4
    gamma_l2: float = 1e-4
    alpha: tuple = ()  # empty: equal horizon weights
    k_max: int = 3
    batch_size: int = 128
    epochs_pretrain: int = 5
    epochs_joint: int = 12
    lr: float = 1e-3
    clip_norm: float = 5.0
    purge_gap: int = 5
    embargo: int = 5
    val_fraction: float = 0.2
    renormalize: bool = True
    grid_search: bool = False
    grid_gamma_tv: tuple = (0.0, 1e-4, 1e-3)
    grid_gamma_l2: tuple = (0.0, 1e-4, 1e-3)


@dataclass(frozen=True)
class RiskNeutralSection:
    mode: str = "drift-shift"
    rate_annual: float = 0.03
    dividend_annual: float = 0.0
    tol: float = 1e-10
    strikes_lo: float = 0.85
    strikes_hi: float = 1.15
    n_strikes: int = 31
    k_max: int = 25
    surface_tol: float = 1e-8
    surface_dates: int = 5


@dataclass(frozen=True)
class EvaluationSection:
    levels: tuple = (0.95, 0.99)
    reps: int = 500
    crps_method: str = "auto"  # gmm laws use the exact mixture formula under "auto"
    reference: str = "neural"


@dataclass(frozen=True)
class PortfolioSection:
    signal: str = "isj"
    horizon: str = "1w"
    risk_aversion: float = 5.0
    cost: float = 0.0005
    turnover_max: float = 0.5
    weight_cap: float = 1.0
    band: float = 0.01
    downside_aversion: float = 1.0
    gate_percentile: float = 0.95
    gate_mode: str = "hard"
    hs_window: int = 52


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "simulate": SimulateSection,
    "features": FeaturesSection,
    "network": NetworkSection,
    "train": TrainSection,
    "riskneutral": RiskNeutralSection,
    "evaluation": EvaluationSection,
    "portfolio": PortfolioSection,
}
DEFAULT_HORIZONS = {"1d": 1, "1w": 5}


@dataclass(frozen=True)
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    riskneutral: RiskNeutralSection = field(default_factory=RiskNeutralSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    portfolio: PortfolioSection = field(default_factory=PortfolioSection)
    horizons: tuple = tuple(DEFAULT_HORIZONS.items())

    def __post_init__(self):
        labels = [h for h, _ in self.horizons]
        if not labels or len(set(labels)) != len(labels):
            raise ConfigError("horizon labels must be unique and nonempty")
        if any(int(d) < 1 for _, d in self.horizons):
            raise ConfigError("horizon step counts must be >= 1")
        if len(set(d for _, d in self.horizons)) != len(labels):
            raise ConfigError("horizon step counts must be unique")
        if self.portfolio.horizon not in labels:
            raise ConfigError(f"portfolio.horizon {self.portfolio.horizon!r} is not a registered horizon")
        if self.run.n_assets < 1:
            raise ConfigError("run.n_assets must be >= 1")
        if not 0.2 <= self.run.train_fraction <= 0.9:
            raise ConfigError("run.train_fraction must lie in [0.2, 0.9]")
        if self.data.daily_csv and len(self.data.intraday_csv) not in (0, len(self.data.daily_csv)):
            raise ConfigError("data.intraday_csv must be empty or match data.daily_csv")
        if self.riskneutral.mode not in ("drift-shift", "esscher"):
            raise ConfigError("riskneutral.mode must be 'drift-shift' or 'esscher'")
        if self.portfolio.signal not in ("isj", "downside"):
            raise ConfigError("portfolio.signal must be 'isj' or 'downside'")
        if self.train.alpha and len(self.train.alpha) != len(labels):
            raise ConfigError("train.alpha must have one weight per horizon")
        if self.network.lam_bounds and len(self.network.lam_bounds) != len(labels):
            raise ConfigError("network.lam_bounds must have one bound per horizon")
        if self.evaluation.crps_method not in ("auto", "quad", "closed"):
            raise ConfigError("evaluation.crps_method must be auto, quad or closed")

    @property
    def horizon_labels(self):
        return tuple(h for h, _ in self.horizons)

    @property
    def horizon_days(self):
        return tuple(int(d) for _, d in self.horizons)

    @property
    def n_assets(self):
        return len(self.data.daily_csv) if self.data.daily_csv else self.run.n_assets

    def lam_bounds(self):
        if self.network.lam_bounds:
            return tuple(float(b) for b in self.network.lam_bounds)
        return tuple(min(0.5 * d, 1.5) for d in self.horizon_days)

    def with_overrides(self, **sections):
        """Copy with selected keys replaced, e.g. ``run={"seed": 3}``."""
        changes = {}
        for name, values in sections.items():
            changes[name] = dataclasses.replace(getattr(self, name), **values)
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["horizons"] = dict(self.horizons)
        return out


def _coerce(cls, name, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = {}
    for key, val in raw.items():
        default = known[key].default
        if isinstance(default, tuple):
            if not isinstance(val, list):
                raise ConfigError(f"{name}.{key} must be an array")
            val = tuple(val)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{name}.{key} must be true or false")
        elif isinstance(default, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{name}.{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            val = float(val)
        elif isinstance(default, str) and not isinstance(val, str):
            raise ConfigError(f"{name}.{key} must be a string")
        values[key] = val
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(raw: dict) -> PipelineConfig:
    unknown = sorted(set(raw) - set(SECTIONS) - {"horizons"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    kwargs = {name: _coerce(cls, name, raw[name]) for name, cls in SECTIONS.items() if name in raw}
    if "horizons" in raw:
        h = raw["horizons"]
        if not isinstance(h, dict) or not all(isinstance(v, int) and not isinstance(v, bool) for v in h.values()):
            raise ConfigError("[horizons] must map labels to integer step counts")
        kwargs["horizons"] = tuple(h.items())
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    """Parse a TOML file; relative data paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(raw)
    base = path.parent
    if cfg.data.daily_csv:
        resolve = lambda items: tuple(str(p if Path(p).is_absolute() else base / p) for p in items)  # noqa: E731
        cfg = cfg.with_overrides(data={"daily_csv": resolve(cfg.data.daily_csv),
                                       "intraday_csv": resolve(cfg.data.intraday_csv)})
    return cfg


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic 32-bit seed for ``stage`` derived from the global seed."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def annual_to_period(rate_annual: float, days: int) -> float:
    """Continuously compounded carry over ``days`` trading days."""
    return rate_annual * days / 252.0
