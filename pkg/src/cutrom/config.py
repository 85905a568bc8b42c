"""Run configuration: plain-text key/value files with sections.

Grammar (INI style, parsed with configparser):

    [run]
    case = steady_wavy | unsteady_wavy | unsteady_cylinder

    [geometry] [mesh] [physics] [stabilization] [solver] [time] [rom] [io]
    key = value

Every key has a case preset default; unknown sections or keys are rejected.
Values are coerced to the type of the preset default (bool, int, float,
string, or comma-separated integer list).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, fields, replace

from .assembly import AssemblyOptions, StabilizationConstants
from .background_mesh import GHOST_CUT_ANY, GHOST_CUT_CUT
from .errors import ParseError, ValidationError
from .geometry import CYLINDER, WAVY_WALL, LevelsetFamily, ParameterSpace

CASES = ("steady_wavy", "unsteady_wavy", "unsteady_cylinder")


@dataclass(frozen=True)
class GeometryConfig:
    family: str = WAVY_WALL
    k1: float = 10.0
    k2: float = 10.0
    k3: float = -2.0
    k4: float = -1.0
    k5: float = 1.0
    center_x: float = -1.5
    radius: float = 0.2
    theta_lo: float = -0.1
    theta_hi: float = 0.5
    anchor_x: float = 0.0
    anchor_y: float = 0.0


@dataclass(frozen=True)
class MeshConfig:
    x0: float = -2.0
    y0: float = -1.0
    x1: float = 2.0
    y1: float = 1.0
    h: float = 0.07


@dataclass(frozen=True)
class PhysicsConfig:
    mu: float = 0.05
    u_in_x: float = 1.0
    u_in_y: float = 0.0
    f_x: float = 0.0
    f_y: float = 0.0


@dataclass(frozen=True)
class StabilizationConfig:
    gamma: float = 10.0
    gamma_phi: float = 10.0
    gamma_u: float = 0.001
    gamma_p: float = 0.1
    gamma_mu: float = 0.1
    gamma_beta: float = 0.0
    c_u: float = 1.0
    lambda_s: float = 10.0
    gamma_s0: float = 0.1
    gamma_s1: float = 0.01
    alpha: float = 0.1
    quad_volume: int = 5
    quad_interface: int = 5
    quad_facet: int = 3
    quad_supremizer: int = 3
    gu_max_j: int = 1
    ghost_facet_mode: str = GHOST_CUT_ANY
    u_inf_face: str = "max"
    include_inlet_convection: bool = True


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-8
    newton_max_iter: int = 25
    linear_solver: str = "direct"
    continuation: bool = False
    divergence_patience: int = 3


@dataclass(frozen=True)
class TimeConfig:
    tau: float = 0.011
    t_final: float = 0.7


@dataclass(frozen=True)
class RomConfig:
    n_train: int = 150
    n_test: int = 30
    n_values: tuple = (2, 5, 10, 20)
    seed_train: int = 1234
    seed_test: int = 4321
    n_max: int = 50
    supremizer: bool = True


@dataclass(frozen=True)
class IoConfig:
    outdir: str = "artifacts"


_SECTION_TYPES = {
    "geometry": GeometryConfig,
    "mesh": MeshConfig,
    "physics": PhysicsConfig,
    "stabilization": StabilizationConfig,
    "solver": SolverConfig,
    "time": TimeConfig,
    "rom": RomConfig,
    "io": IoConfig,
}

_CASE_PRESETS = {
    "steady_wavy": {
        "geometry": {},
        "rom": {"n_train": 150, "n_test": 30},
    },
    "unsteady_wavy": {
        "geometry": {},
        "rom": {"n_train": 200, "n_test": 30},
        "time": {"tau": 0.011, "t_final": 0.7},
    },
    "unsteady_cylinder": {
        "geometry": {"family": CYLINDER, "theta_lo": -0.65, "theta_hi": 0.65,
                     "radius": 0.2, "center_x": -1.5},
        "rom": {"n_train": 200, "n_test": 30},
        "time": {"tau": 0.07 / 6.0, "t_final": 0.7},
    },
}


@dataclass(frozen=True)
class RunConfig:
    case: str
    geometry: GeometryConfig
    mesh: MeshConfig
    physics: PhysicsConfig
    stabilization: StabilizationConfig
    solver: SolverConfig
    time: TimeConfig
    rom: RomConfig
    io: IoConfig

    @property
    def is_unsteady(self):
        return self.case.startswith("unsteady")

    @property
    def rect(self):
        m = self.mesh
        return (m.x0, m.y0, m.x1, m.y1)

    @property
    def u_in(self):
        return (self.physics.u_in_x, self.physics.u_in_y)

    @property
    def body_force(self):
        f = (self.physics.f_x, self.physics.f_y)
        return None if f == (0.0, 0.0) else f

    @property
    def anchor(self):
        return (self.geometry.anchor_x, self.geometry.anchor_y)

    def family(self):
        g = self.geometry
        if g.family == WAVY_WALL:
            return LevelsetFamily.wavy_wall(
                {"k1": g.k1, "k2": g.k2, "k3": g.k3, "k4": g.k4, "k5": g.k5})
        return LevelsetFamily.cylinder(center_x=g.center_x, radius=g.radius)

    def parameter_space(self):
        return ParameterSpace(self.geometry.theta_lo, self.geometry.theta_hi)

    def stabilization_constants(self):
        s = self.stabilization
        return StabilizationConstants(
            mu=self.physics.mu, gamma=s.gamma, gamma_phi=s.gamma_phi,
            gamma_u=s.gamma_u, gamma_p=s.gamma_p, gamma_mu=s.gamma_mu,
            gamma_beta=s.gamma_beta, c_u=s.c_u, lambda_s=s.lambda_s,
            gamma_s0=s.gamma_s0, gamma_s1=s.gamma_s1, alpha=s.alpha)

    def assembly_options(self):
        s = self.stabilization
        return AssemblyOptions(
            quad_volume=s.quad_volume, quad_interface=s.quad_interface,
            quad_facet=s.quad_facet, quad_supremizer=s.quad_supremizer,
            gu_max_j=s.gu_max_j,
            include_inlet_convection=s.include_inlet_convection,
            u_inf_face=s.u_inf_face)

    def with_overrides(self, overrides):
        """New config with (section.key, value-string) pairs applied."""
        cfg = self
        for dotted, raw in overrides:
            if dotted == "run.case":
                raise ValidationError("the case cannot be overridden by flag")
            try:
                section, key = dotted.split(".", 1)
            except ValueError:
                raise ValidationError(f"override {dotted!r} is not section.key")
            if section not in _SECTION_TYPES:
                raise ValidationError(f"unknown section {section!r}")
            block = getattr(cfg, section)
            if not any(f.name == key for f in fields(block)):
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            default = getattr(type(block)(), key)
            value = _coerce(section, key, raw, default)
            cfg = replace(cfg, **{section: replace(block, **{key: value})})
        _validate(cfg)
        return cfg


def _coerce(section, key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ValidationError(
            f"cannot parse value {raw!r} for [{section}] {key}")


def default_config(case):
    """Full paper defaults for one of the three experiment cases."""
    if case not in CASES:
        raise ValidationError(f"unknown case {case!r}; choose one of {CASES}")
    preset = _CASE_PRESETS[case]
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sections[name] = cls(**preset.get(name, {}))
    cfg = RunConfig(case=case, **sections)
    _validate(cfg)
    return cfg


def _validate(cfg):
    m = cfg.mesh
    if m.h <= 0.0:
        raise ValidationError("mesh h must be positive")
    if not (m.x0 < m.x1 and m.y0 < m.y1):
        raise ValidationError("mesh rectangle is degenerate")
    g = cfg.geometry
    if g.family not in (WAVY_WALL, CYLINDER):
        raise ValidationError(f"unknown geometry family {g.family!r}")
    if not g.theta_lo < g.theta_hi:
        raise ValidationError("theta range requires theta_lo < theta_hi")
    if g.family == CYLINDER and g.radius <= 0.0:
        raise ValidationError("cylinder radius must be positive")
    if cfg.physics.mu <= 0.0:
        raise ValidationError("viscosity must be positive")
    s = cfg.solver
    if not (0.0 < s.newton_tol <= 1e-2):
        raise ValidationError("newton_tol must lie in (0, 1e-2]")
    if s.newton_max_iter < 1:
        raise ValidationError("newton_max_iter must be >= 1")
    if s.linear_solver != "direct":
        raise ValidationError("only the direct linear solver is shipped")
    st = cfg.stabilization
    for name in ("quad_volume", "quad_interface", "quad_facet",
                 "quad_supremizer"):
        if getattr(st, name) not in range(1, 7):
            raise ValidationError(f"{name} must lie in 1..6")
    if st.gu_max_j not in (0, 1):
        raise ValidationError("gu_max_j must be 0 or 1")
    if st.ghost_facet_mode not in (GHOST_CUT_ANY, GHOST_CUT_CUT):
        raise ValidationError("unknown ghost_facet_mode")
    if st.u_inf_face not in ("max", "mean"):
        raise ValidationError("u_inf_face must be max or mean")
    r = cfg.rom
    if r.n_train < 1 or r.n_test < 1:
        raise ValidationError("n_train and n_test must be >= 1")
    if r.n_max < 1:
        raise ValidationError("n_max must be >= 1")
    if not r.n_values or any(n < 1 for n in r.n_values):
        raise ValidationError("n_values must be positive integers")
    if cfg.is_unsteady:
        t = cfg.time
        if t.tau <= 0.0 or t.t_final <= 0.0 or t.tau > t.t_final:
            raise ValidationError("unsteady cases need 0 < tau <= t_final")


def parse_config(path, case=None, overrides=None):
    """Parse a config file against its case preset; defaults fill the gaps."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise
    except (configparser.Error, OSError) as exc:
        line = getattr(exc, "lineno", None)
        where = f" (line {line})" if line else ""
        raise ParseError(f"{path}: {exc.message if hasattr(exc, 'message') else exc}{where}")

    file_case = None
    if parser.has_section("run"):
        run_keys = set(parser.options("run"))
        if run_keys - {"case"}:
            raise ValidationError(
                f"unknown keys in [run]: {sorted(run_keys - {'case'})}")
        if parser.has_option("run", "case"):
            file_case = parser.get("run", "case").strip()
    chosen = case or file_case
    if chosen is None:
        raise ValidationError("no case given ([run] case=... or --case)")
    if case and file_case and case != file_case:
        raise ValidationError(
            f"case flag {case!r} contradicts file case {file_case!r}")

    cfg = default_config(chosen)
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        block = getattr(cfg, name)
        if not parser.has_section(name):
            sections[name] = block
            continue
        known = {f.name for f in fields(cls)}
        updates = {}
        for key in parser.options(name):
            if key not in known:
                raise ValidationError(f"unknown key {key!r} in [{name}]")
            default = getattr(cls(), key)
            updates[key] = _coerce(name, key, parser.get(name, key), default)
        sections[name] = replace(block, **updates)
    for extra in parser.sections():
        if extra not in _SECTION_TYPES and extra != "run":
            raise ValidationError(f"unknown section [{extra}]")

    cfg = RunConfig(case=chosen, **sections)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    _validate(cfg)
    return cfg


def serialize_config(cfg):
    """INI text that parses back to an equal RunConfig."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["run"] = {"case": cfg.case}
    for name in _SECTION_TYPES:
        block = asdict(getattr(cfg, name))
        parser[name] = {
            k: (",".join(str(x) for x in v) if isinstance(v, tuple)
                else repr(v) if isinstance(v, float) else str(v))
            for k, v in block.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config_text(text, case=None, overrides=None, _tmpdir=[None]):
    """parse_config for in-memory text (testing convenience)."""
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as fh:
        fh.write(text)
        name = fh.name
    return parse_config(name, case=case, overrides=overrides)
