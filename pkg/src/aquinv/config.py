"""Experiment configuration: named scales, JSON loading, overrides and validation."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AquinvError, ConfigError
from .esmda import InflationSchedule, PriorSpec
from .forward import FlowBCs, SolverOptions
from .grid import DAYS_PER_YEAR, Grid3, ParameterLayout, SourceConfig, TransportParams, locate_cell
from .observations import NoiseModel, WellNetwork

STAGES = ("ti", "patches", "caae", "truth", "noise", "dataset", "surrogate", "prior", "esmda")

TRUTH_SL = (291.0, 625.0)
TRUTH_SS = (224.0, 174.0, 869.0, 201.0, 741.0)


@dataclass
class GridSection:
    nx: int = 81
    ny: int = 41
    nz: int = 6
    lx: float = 2500.0
    ly: float = 1250.0
    lz: float = 300.0


@dataclass
class SourceSection:
    layer: int = 3
    period_years: float = 4.0
    q_s: float = 2e-5
    truth_sl: list = field(default_factory=lambda: list(TRUTH_SL))
    truth_ss: list = field(default_factory=lambda: list(TRUTH_SS))


@dataclass
class PriorSection:
    sl_lower: list = field(default_factory=lambda: [125.0, 125.0])
    sl_upper: list = field(default_factory=lambda: [625.0, 1125.0])
    ss_lower: float = 50.0
    ss_upper: float = 1000.0


@dataclass
class WellSection:
    i: list = field(default_factory=lambda: [10, 22, 34, 46, 58, 70])
    j: list = field(default_factory=lambda: [8, 16, 24, 32])
    layers: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    sensors: list = None            # explicit [[i, j, k], ...] overrides the lattice
    n_times: int = 10
    spacing_years: float = 4.0


@dataclass
class NoiseSection:
    sigma_c: float = 0.5
    sigma_h: float = 0.5


@dataclass
class TrainingImageSection:
    dims: list = field(default_factory=lambda: [150, 180, 120])
    facies: list = field(default_factory=lambda: [0.0, 3.0])
    proportion: float = 0.3
    corr_len: list = field(default_factory=lambda: [10.0, 3.0, 1.5])
    split: float = 0.875
    path: str = None


@dataclass
class CaaeSection:
    features: int = 48
    latent_channels: int = 2
    n_db: int = 3
    n_l: int = 5
    growth: int = 16
    beta: float = 0.2
    w: float = 0.01
    n_train: int = 23000
    n_test: int = 2200
    epochs: int = 50
    lr: float = 2e-4
    batch_size: int = 32


@dataclass
class SurrogateSection:
    init_features: int = 48
    growth: int = 48
    blocks: list = field(default_factory=lambda: [3, 6, 3])
    n_train: int = 800
    n_test: int = 150
    epochs: int = 200
    lr: float = 5e-3
    batch_size: int = 16
    lam: float = 1e-5
    mask_weight: float = 5.0
    c_ref: float = 1000.0
    h_ref: float = 30.0


@dataclass
class EsmdaSection:
    n_e: int = 960
    n_a: int = 10
    alphas: list = None             # defaults to N_a copies of N_a
    energy: float = 0.999


@dataclass
class ExperimentConfig:
    scale: str = "paper"
    grid: GridSection = field(default_factory=GridSection)
    bcs: dict = field(default_factory=lambda: {"h_left": 30.0, "h_right": 0.0})
    transport: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    source: SourceSection = field(default_factory=SourceSection)
    prior: PriorSection = field(default_factory=PriorSection)
    wells: WellSection = field(default_factory=WellSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    ti: TrainingImageSection = field(default_factory=TrainingImageSection)
    caae: CaaeSection = field(default_factory=CaaeSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    esmda: EsmdaSection = field(default_factory=EsmdaSection)
    seed: int = 0
    threads: int = 1

    # -- derived objects ------------------------------------------------
    def grid3(self):
        g = self.grid
        return Grid3(g.nx, g.ny, g.nz, g.lx, g.ly, g.lz)

    def flow_bcs(self):
        return FlowBCs(**self.bcs)

    def transport_params(self):
        return TransportParams(**self.transport)

    def solver_options(self):
        return SolverOptions(**self.solver)

    @property
    def period_len(self):
        return self.source.period_years * DAYS_PER_YEAR

    def observation_times(self):
        dt = self.wells.spacing_years * DAYS_PER_YEAR
        return tuple(dt * (i + 1) for i in range(self.wells.n_times))

    def well_network(self):
        w = self.wells
        times = self.observation_times()
        if w.sensors is not None:
            return WellNetwork(tuple(tuple(s) for s in w.sensors), times)
        return WellNetwork.lattice(w.i, w.j, w.layers, times)

    def noise_model(self):
        return NoiseModel(self.noise.sigma_c, self.noise.sigma_h)

    def truth_source(self):
        s = self.source
        return SourceConfig(s.truth_sl[0], s.truth_sl[1], s.layer, tuple(s.truth_ss), self.period_len,
                            0.0, s.q_s)

    def source_template(self):
        return self.truth_source()

    def caae_spec(self):
        from .caae import CaaeSpec

        c = self.caae
        return CaaeSpec(self.grid3().shape, c.features, c.latent_channels, c.n_db, c.n_l, c.growth, c.beta, c.w)

    def densed_spec(self):
        from .densed import DenseEdSpec

        s = self.surrogate
        return DenseEdSpec(self.grid3().shape, 3, 2, s.init_features, s.growth, tuple(s.blocks))

    def layout(self):
        return ParameterLayout(self.caae_spec().latent_shape, len(self.source.truth_ss))

    def prior_spec(self):
        p = self.prior
        return PriorSpec(self.layout(), tuple(p.sl_lower), tuple(p.sl_upper), p.ss_lower, p.ss_upper)

    def schedule(self):
        e = self.esmda
        if e.alphas is None:
            return InflationSchedule.constant(e.n_a)
        return InflationSchedule(tuple(e.alphas))

    def stage_seed(self, stage):
        if stage not in STAGES:
            raise ConfigError(f"unknown seed stage {stage!r}")
        seq = np.random.SeedSequence([int(self.seed), STAGES.index(stage)])
        return int(seq.generate_state(1)[0])

    def seeds(self):
        return {stage: self.stage_seed(stage) for stage in STAGES}

    def to_dict(self):
        return dataclasses.asdict(self)

    # -- validation -----------------------------------------------------
    def validate(self):
        """Build every derived object and check cross-references; raise :class:`ConfigError`."""
        try:
            grid = self.grid3()
            self.flow_bcs()
            self.transport_params()
            self.solver_options()
            wells = self.well_network().validate(grid)
            self.noise_model()
            src = self.truth_source()
            locate_cell(src.sl_x, src.sl_y, src.layer, grid)
            prior = self.prior_spec()
            for lo, hi, extent in zip(prior.sl_lower, prior.sl_upper, (grid.lx, grid.ly)):
                if lo < 0 or hi > extent:
                    raise ConfigError("prior source-location bounds leave the domain")
            self.schedule()
            self.caae_spec()
            self.densed_spec()
        except ConfigError:
            raise
        except (AquinvError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        steps = np.asarray(wells.times) * self.solver_options().substeps / self.period_len
        if np.any(np.abs(steps - np.round(steps)) > 1e-9 * np.maximum(steps, 1)):
            raise ConfigError("observation times must align with transport substeps")
        if self.scale not in ("paper", "desk", "custom"):
            raise ConfigError(f"unknown scale {self.scale!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for section, key in (("caae", "n_train"), ("surrogate", "n_train"), ("esmda", "n_e")):
            if getattr(getattr(self, section), key) < 1:
                raise ConfigError(f"{section}.{key} must be positive")
        if self.esmda.n_e < 2:
            raise ConfigError("ESMDA needs at least two members")
        return self


def paper_config():
    return ExperimentConfig(scale="paper")


def desk_config():
    return ExperimentConfig(
        scale="desk",
        grid=GridSection(40, 20, 4, 2500.0, 1250.0, 300.0),
        source=SourceSection(layer=2, q_s=1e-3),
        wells=WellSection(i=[5, 9, 13, 17, 22, 28], j=[4, 8, 12, 16], layers=[2]),
        ti=TrainingImageSection(dims=[120, 60, 40], split=0.8),
        caae=CaaeSection(n_train=2000, n_test=200, epochs=10),
        surrogate=SurrogateSection(n_train=64, n_test=16, epochs=40),
        esmda=EsmdaSection(n_e=128, n_a=4),
    )


SCALES = {"paper": paper_config, "desk": desk_config}


def _build(cls, data, where):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return data


def _merge(obj, data, where="config"):
    """Recursively overlay a dict onto a dataclass instance (in place)."""
    _build(type(obj), data, where)
    for key, value in data.items():
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, f"{where}.{key}")
        elif isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key}: expected an object")
            current.update(value)
        else:
            setattr(obj, key, value)
    return obj


def from_dict(data):
    """Config from a JSON-style dict; ``scale`` picks the base defaults."""
    data = dict(data)
    scale = data.get("scale", "paper")
    if scale not in SCALES and scale != "custom":
        raise ConfigError(f"unknown scale {scale!r}")
    base = SCALES.get(scale, paper_config)()
    return _merge(base, data)


def load_config(source):
    """Load a config from a scale name, a JSON file path, or a dict."""
    if isinstance(source, dict):
        return from_dict(source)
    if isinstance(source, str) and source in SCALES:
        return SCALES[source]()
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config {source!r} is neither a named scale nor an existing file")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, items):
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, text = item.split("=", 1)
        keys = path.split(".")
        target = cfg
        for key in keys[:-1]:
            if not hasattr(target, key):
                raise ConfigError(f"unknown config section {path!r}")
            target = getattr(target, key)
        last = keys[-1]
        value = _parse_value(text)
        if isinstance(target, dict):
            target[last] = value
        elif hasattr(target, last) and not dataclasses.is_dataclass(getattr(target, last)):
            setattr(target, last, value)
        else:
            raise ConfigError(f"unknown or non-scalar config key {path!r}")
    return cfg
