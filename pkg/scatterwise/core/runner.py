"""
Scene orchestration: configuration, pipeline runs and reports
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.errors import ConfigError, RegimeViolationError, ScatterwiseError
from ..utils.helpers import as_complex
from ..utils.io import (
    dump_report, load_config, read_voxel_csv, to_plain, write_current_csv,
    write_field_grid_csv, write_table_csv, write_tensor_csv, write_voxel_csv,
)
from .geometry import STRATEGIES, QuadratureSpec, load_mesh, make_canonical_mesh
from .medium import (
    DEFAULT_DIRECT_CAP, DEFAULT_DIRECTIONS, LOOKUPS, DensityField, evaluate_effective_field,
    limit_diagnostics, q_from_density, solve_effective_field, uniform_density,
)
from .multiparticle import (
    DEFAULT_DENSE_CAP, IncidentField, ParticleInstance, centers_of, dominance_bound, field_grid,
    lattice_positions, particle_from_ball, particle_from_mesh, random_positions, regime_report,
    solve_fixed_point, stratified_positions,
)
from .nearfield import (
    assemble_A, boundary_residual, exciting_field_from_scene, incident_excitation, near_field,
    solve_current,
)
from .polarizability import DEFAULT_PANEL_BUDGET, MaterialContrast
from .scattering import (
    ScatterFrame, WaveContext, apply_s_matrix_E, farzone_error_report, h_from_e, s_matrix_E,
    s_operator,
)

_LOGGER = logging.getLogger(__name__)

MODES = ('tensors', 'single', 'nbody', 'medium', 'nearfield')
SHAPES = ('sphere', 'ellipsoid', 'box', 'mesh', 'ball')
PLACEMENTS = ('lattice', 'random', 'stratified')
FIELD_COLUMNS = ('E1', 'E2', 'E3', 'H1', 'H2', 'H3')

_SIZE_KEYS = {'sphere': 'radius', 'ball': 'radius', 'ellipsoid': 'semiaxes', 'box': 'extents'}
_MISSING = object()


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class _Section:
    """A mapping inside the scene file that knows its field path and line numbers."""

    def __init__(self, data: Dict[str, Any], lines: Dict[str, int], path: str = ''):
        self.data = data
        self.lines = lines
        self.path = path

    def _field(self, key: str) -> str:
        if key.startswith('['):
            return f"{self.path}{key}"
        return f"{self.path}.{key}" if self.path else key

    def _line(self, field_path: str) -> Optional[int]:
        while field_path:
            if field_path in self.lines:
                return self.lines[field_path]
            cut = max(field_path.rfind('.'), field_path.rfind('['))
            field_path = field_path[:cut] if cut > 0 else ''
        return None

    def error(self, key: str, message: str) -> ConfigError:
        path = self._field(key) if key else self.path
        return ConfigError(message, field=path or None, line=self._line(path))

    def has(self, key: str) -> bool:
        return key in self.data and self.data[key] is not None

    def allow(self, keys: Sequence[str]) -> None:
        for key in self.data:
            if key not in keys:
                raise self.error(key, f"unknown key (expected one of {', '.join(keys)})")

    def raw(self, key: str, default: Any = _MISSING) -> Any:
        if not self.has(key):
            if default is _MISSING:
                raise self.error(key, "required field is missing")
            return default
        return self.data[key]

    def number(self, key: str, default: Any = _MISSING, positive: bool = False,
               integer: bool = False, minimum: Optional[float] = None) -> Any:
        value = self.raw(key, default)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(key, f"expected a number, got {value!r}")
        if integer:
            if float(value) != int(value):
                raise self.error(key, f"expected an integer, got {value!r}")
            value = int(value)
        else:
            value = float(value)
        if not np.isfinite(value):
            raise self.error(key, "must be finite")
        if positive and not value > 0:
            raise self.error(key, f"must be positive, got {value}")
        if minimum is not None and value < minimum:
            raise self.error(key, f"must be >= {minimum}, got {value}")
        return value

    def flag(self, key: str, default: bool = False) -> bool:
        value = self.raw(key, default)
        if not isinstance(value, bool):
            raise self.error(key, f"expected true or false, got {value!r}")
        return value

    def choice(self, key: str, options: Sequence[str], default: Any = _MISSING) -> str:
        value = self.raw(key, default)
        if value not in options:
            raise self.error(key, f"expected one of {', '.join(options)}, got {value!r}")
        return value

    def complex(self, key: str, default: Any = _MISSING) -> complex:
        try:
            return as_complex(self.raw(key, default), self._field(key))
        except ScatterwiseError as e:
            raise self.error(key, str(e))

    def vector(self, key: str, default: Any = _MISSING, length: int = 3,
               kind: type = float, positive: bool = False) -> Tuple:
        value = self.raw(key, default)
        if value is None:
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool) and length == 1:
            value = [value]
        if not isinstance(value, (list, tuple)) or len(value) != length:
            raise self.error(key, f"expected a list of {length} values, got {value!r}")
        try:
            if kind is complex:
                out = tuple(as_complex(v) for v in value)
            else:
                out = tuple(kind(v) for v in value)
                if kind is int and any(float(v) != int(v) for v in value):
                    raise ValueError("non-integer entry")
        except (TypeError, ValueError, ScatterwiseError) as e:
            raise self.error(key, f"invalid entry in {value!r} ({e})")
        if kind is float and not all(np.isfinite(out)):
            raise self.error(key, "entries must be finite")
        if positive and min(out) <= 0:
            raise self.error(key, f"entries must be positive, got {value!r}")
        return out

    def box(self, key: str, default: Any = _MISSING,
            flat: bool = False) -> Optional[Tuple[Tuple[float, ...], ...]]:
        value = self.raw(key, default)
        if value is None:
            return None
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise self.error(key, "expected [[x0, y0, z0], [x1, y1, z1]]")
        corners = _Section({'[0]': value[0], '[1]': value[1]}, self.lines, self._field(key))
        lo, hi = corners.vector('[0]'), corners.vector('[1]')
        if any(b < a or (b == a and not flat) for a, b in zip(lo, hi)):
            raise self.error(key, "upper corner must exceed the lower corner on every axis")
        return lo, hi

    def points(self, key: str) -> Tuple[Tuple[float, float, float], ...]:
        value = self.raw(key, [])
        if not isinstance(value, (list, tuple)):
            raise self.error(key, "expected a list of [x, y, z] points")
        rows = _Section({f"[{i}]": v for i, v in enumerate(value)}, self.lines, self._field(key))
        return tuple(rows.vector(f"[{i}]") for i in range(len(value)))

    def section(self, key: str, required: bool = False) -> Optional['_Section']:
        if not self.has(key):
            if required:
                raise self.error(key, "required section is missing")
            return None
        value = self.data[key]
        if not isinstance(value, dict):
            raise self.error(key, "expected a mapping")
        return _Section(value, self.lines, self._field(key))

    def sections(self, key: str) -> List['_Section']:
        value = self.raw(key, [])
        if not isinstance(value, list):
            raise self.error(key, "expected a list")
        out = []
        for i, item in enumerate(value):
            path = f"{self._field(key)}[{i}]"
            if not isinstance(item, dict):
                raise ConfigError("expected a mapping", field=path, line=self._line(path))
            out.append(_Section(item, self.lines, path))
        return out


@dataclass(frozen=True)
class ParticleSpec:
    """One particle entry of a scene file."""

    shape: str
    size: Tuple[float, ...] = (1.0,)
    path: Optional[Path] = None
    refinement: int = 3
    center: Optional[Tuple[float, float, float]] = None
    eps: complex = 1.0
    mu: complex = 1.0
    sigma: float = 0.0
    skin: Optional[bool] = None

    @property
    def template_key(self) -> 'ParticleSpec':
        return replace(self, center=None)

    @classmethod
    def from_section(cls, s: _Section, base_dir: Path) -> 'ParticleSpec':
        s.allow(['shape', 'radius', 'semiaxes', 'extents', 'path', 'refinement', 'center',
                 'eps', 'mu', 'sigma', 'skin'])
        shape = s.choice('shape', SHAPES)
        size: Tuple[float, ...] = ()
        path = None
        if shape == 'mesh':
            path = Path(s.raw('path'))
            if not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise s.error('path', f"mesh file not found: {path}")
        else:
            key = _SIZE_KEYS[shape]
            size = s.vector(key, length=1 if key == 'radius' else 3, positive=True)
        skin = s.raw('skin', None)
        if skin is not None and not isinstance(skin, bool):
            raise s.error('skin', f"expected true or false, got {skin!r}")
        return cls(
            shape=shape, size=size, path=path,
            refinement=s.number('refinement', 3, integer=True, minimum=0),
            center=s.vector('center', None),
            eps=s.complex('eps', 1.0), mu=s.complex('mu', 1.0),
            sigma=s.number('sigma', 0.0, minimum=0.0), skin=skin,
        )


@dataclass(frozen=True)
class PlacementSpec:
    """Generated copies of a template particle (lattice, random or stratified)."""

    kind: str
    template: ParticleSpec
    shape: Tuple[int, int, int] = (1, 1, 1)
    spacing: float = 1.0
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    count: int = 0
    box: Optional[Tuple[Tuple[float, ...], ...]] = None
    min_distance: float = 0.0
    jitter: float = 0.5

    @classmethod
    def from_section(cls, s: _Section, base_dir: Path) -> 'PlacementSpec':
        s.allow(['kind', 'shape', 'spacing', 'origin', 'count', 'box', 'min_distance',
                 'cells', 'jitter', 'template'])
        kind = s.choice('kind', PLACEMENTS)
        template = ParticleSpec.from_section(s.section('template', required=True), base_dir)
        if kind == 'lattice':
            return cls(kind=kind, template=template,
                       shape=s.vector('shape', kind=int, positive=True),
                       spacing=s.number('spacing', positive=True),
                       origin=s.vector('origin', (0.0, 0.0, 0.0)))
        if kind == 'random':
            return cls(kind=kind, template=template,
                       count=s.number('count', integer=True, minimum=0),
                       box=s.box('box'),
                       min_distance=s.number('min_distance', 0.0, minimum=0.0))
        jitter = s.number('jitter', 0.5, minimum=0.0)
        if jitter >= 1.0:
            raise s.error('jitter', f"must be below 1, got {jitter}")
        return cls(kind=kind, template=template, shape=s.vector('cells', kind=int, positive=True),
                   box=s.box('box'), jitter=jitter)

    def positions(self, seed: int) -> np.ndarray:
        if self.kind == 'lattice':
            return lattice_positions(self.shape, self.spacing, self.origin)
        if self.kind == 'random':
            return random_positions(self.count, self.box, self.min_distance, seed=seed)
        return stratified_positions(self.shape, self.box, seed=seed, jitter=self.jitter)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 200
    dense_cap: int = DEFAULT_DENSE_CAP
    strict_dominance: bool = False
    order: Optional[int] = None
    series_tol: float = 1e-8
    max_order: int = 30
    panel_budget: int = DEFAULT_PANEL_BUDGET
    quadrature: QuadratureSpec = QuadratureSpec()

    @classmethod
    def from_section(cls, s: Optional[_Section]) -> 'SolverOptions':
        if s is None:
            return cls()
        s.allow(['tol', 'max_iter', 'dense_cap', 'strict_dominance', 'order', 'series_tol',
                 'max_order', 'panel_budget', 'quadrature'])
        quad = cls.quadrature
        q = s.section('quadrature')
        if q is not None:
            q.allow(['order', 'strategy', 'refinement'])
            quad = QuadratureSpec(order=q.number('order', 1, integer=True, minimum=1),
                                  strategy=q.choice('strategy', STRATEGIES, 'duffy'),
                                  refinement=q.number('refinement', 1, integer=True, minimum=0))
        return cls(
            tol=s.number('tol', 1e-10, positive=True),
            max_iter=s.number('max_iter', 200, integer=True, minimum=1),
            dense_cap=s.number('dense_cap', DEFAULT_DENSE_CAP, integer=True, minimum=1),
            strict_dominance=s.flag('strict_dominance', False),
            order=s.number('order', None, integer=True, minimum=0),
            series_tol=s.number('series_tol', 1e-8, positive=True),
            max_order=s.number('max_order', 30, integer=True, minimum=1),
            panel_budget=s.number('panel_budget', DEFAULT_PANEL_BUDGET, integer=True, minimum=1),
            quadrature=quad,
        )


@dataclass(frozen=True)
class RegimeOptions:
    ka_max: float = 0.2
    kd_min: float = 10.0
    strict: bool = False

    @classmethod
    def from_section(cls, s: Optional[_Section]) -> 'RegimeOptions':
        if s is None:
            return cls()
        s.allow(['ka_max', 'kd_min', 'strict'])
        return cls(ka_max=s.number('ka_max', 0.2, positive=True),
                   kd_min=s.number('kd_min', 10.0, positive=True),
                   strict=s.flag('strict', False))


@dataclass(frozen=True)
class GridSpec:
    box: Tuple[Tuple[float, ...], ...]
    resolution: Tuple[int, int, int]
    margin: float = 1.0

    @classmethod
    def from_section(cls, s: _Section) -> 'GridSpec':
        s.allow(['box', 'resolution', 'margin'])
        resolution = s.vector('resolution', kind=int)
        if min(resolution) < 0:
            raise s.error('resolution', "entries must be non-negative")
        return cls(box=s.box('box', flat=True), resolution=resolution,
                   margin=s.number('margin', 1.0, positive=True))


@dataclass(frozen=True)
class MediumSpec:
    """Voxel grid of a particle cloud, by total count or by a density file."""

    box: Tuple[Tuple[float, ...], ...]
    shape: Tuple[int, int, int]
    template: ParticleSpec
    count: Optional[float] = None
    density_path: Optional[Path] = None
    directions: int = DEFAULT_DIRECTIONS
    tol: float = 1e-10
    max_iter: int = 500
    direct_cap: int = DEFAULT_DIRECT_CAP
    method: str = 'auto'
    lookup: str = 'nearest'
    probes: Tuple[Tuple[float, float, float], ...] = ()

    @classmethod
    def from_section(cls, s: _Section, base_dir: Path) -> 'MediumSpec':
        s.allow(['box', 'shape', 'density', 'template', 'directions', 'tol', 'max_iter',
                 'direct_cap', 'method', 'lookup', 'probes'])
        density = s.raw('density')
        count, path = None, None
        if isinstance(density, str):
            path = Path(density)
            if not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise s.error('density', f"density file not found: {path}")
        else:
            count = s.number('density', minimum=0.0)
        directions = s.number('directions', DEFAULT_DIRECTIONS, integer=True)
        if directions not in (12, 42, 162):
            raise s.error('directions', f"expected 12, 42 or 162, got {directions}")
        return cls(
            box=s.box('box'), shape=s.vector('shape', kind=int, positive=True),
            template=ParticleSpec.from_section(s.section('template', required=True), base_dir),
            count=count, density_path=path, directions=directions,
            tol=s.number('tol', 1e-10, positive=True),
            max_iter=s.number('max_iter', 500, integer=True, minimum=1),
            direct_cap=s.number('direct_cap', DEFAULT_DIRECT_CAP, integer=True, minimum=1),
            method=s.choice('method', ('auto', 'neumann', 'direct'), 'auto'),
            lookup=s.choice('lookup', LOOKUPS, 'nearest'),
            probes=s.points('probes'),
        )


@dataclass(frozen=True)
class NearfieldSpec:
    particle: int = 0
    probes: Tuple[Tuple[float, float, float], ...] = ()
    offset: float = 0.5

    @classmethod
    def from_section(cls, s: Optional[_Section]) -> 'NearfieldSpec':
        if s is None:
            return cls()
        s.allow(['particle', 'probes', 'offset'])
        return cls(particle=s.number('particle', 0, integer=True, minimum=0),
                   probes=s.points('probes'),
                   offset=s.number('offset', 0.5, positive=True))


@dataclass(frozen=True)
class RunConfig:
    """A validated scene: what to compute, on which particles, and where to write it."""

    mode: str
    wave: WaveContext
    particles: Tuple[ParticleSpec, ...] = ()
    placement: Optional[PlacementSpec] = None
    incident: IncidentField = field(default_factory=IncidentField)
    solver: SolverOptions = SolverOptions()
    regime: RegimeOptions = RegimeOptions()
    grid: Optional[GridSpec] = None
    medium: Optional[MediumSpec] = None
    nearfield: NearfieldSpec = NearfieldSpec()
    angles: int = 37
    output_dir: Path = Path('out')
    seed: int = 0
    source: Optional[Path] = None

    @property
    def particle_count(self) -> int:
        count = len(self.particles)
        if self.placement is not None:
            p = self.placement
            count += p.count if p.kind == 'random' else int(np.prod(p.shape))
        return count

    @classmethod
    def from_dict(cls, data: Dict[str, Any], lines: Optional[Dict[str, int]] = None,
                  base_dir: Optional[Path] = None, source: Optional[Path] = None) -> 'RunConfig':
        root = _Section(data, lines or {})
        base_dir = base_dir or Path.cwd()
        root.allow(['mode', 'wave', 'particles', 'placement', 'incident', 'solver', 'regime',
                    'grid', 'medium', 'nearfield', 'far_field', 'output'])
        mode = root.choice('mode', MODES)

        w = root.section('wave', required=True)
        w.allow(['k', 'eps0', 'mu0', 'omega'])
        k, eps0, mu0 = w.number('k', positive=True), w.number('eps0', 1.0, positive=True), \
            w.number('mu0', 1.0, positive=True)
        omega = w.number('omega', None, positive=True)
        if omega is not None and abs(omega * np.sqrt(eps0 * mu0) - k) > 1e-9 * k:
            raise w.error('omega', f"omega sqrt(eps0 mu0) = {omega * np.sqrt(eps0 * mu0)} "
                                   f"does not match k = {k}")
        wave = WaveContext(k=k, eps0=eps0, mu0=mu0, omega=omega)

        particles = tuple(ParticleSpec.from_section(s, base_dir) for s in root.sections('particles'))
        placement_section = root.section('placement')
        placement = PlacementSpec.from_section(placement_section, base_dir) \
            if placement_section is not None else None

        incident = IncidentField.plane_wave((0.0, 0.0, 1.0), (1.0, 0.0, 0.0))
        inc = root.section('incident')
        if inc is not None:
            inc.allow(['direction', 'polarization', 'amplitude'])
            try:
                incident = IncidentField.plane_wave(
                    inc.vector('direction', (0.0, 0.0, 1.0)),
                    inc.vector('polarization', (1.0, 0.0, 0.0), kind=complex),
                    inc.complex('amplitude', 1.0))
            except ScatterwiseError as e:
                if isinstance(e, ConfigError):
                    raise
                raise inc.error('', str(e))

        grid_section = root.section('grid')
        medium_section = root.section('medium')
        far = root.section('far_field')
        angles = 37
        if far is not None:
            far.allow(['angles'])
            angles = far.number('angles', 37, integer=True, minimum=2)
        out = root.section('output')
        output_dir, seed = Path('out'), 0
        if out is not None:
            out.allow(['directory', 'seed'])
            output_dir = Path(str(out.raw('directory', 'out')))
            seed = out.number('seed', 0, integer=True, minimum=0)

        config = cls(
            mode=mode, wave=wave, particles=particles, placement=placement, incident=incident,
            solver=SolverOptions.from_section(root.section('solver')),
            regime=RegimeOptions.from_section(root.section('regime')),
            grid=GridSpec.from_section(grid_section) if grid_section is not None else None,
            medium=MediumSpec.from_section(medium_section, base_dir)
            if medium_section is not None else None,
            nearfield=NearfieldSpec.from_section(root.section('nearfield')),
            angles=angles, output_dir=output_dir, seed=seed, source=source,
        )
        config._check_mode(root)
        return config

    def _check_mode(self, root: _Section) -> None:
        count = self.particle_count
        if self.mode == 'tensors' and count == 0:
            raise root.error('particles', "mode 'tensors' needs at least one particle")
        if self.mode == 'single' and count != 1:
            raise root.error('particles', f"mode 'single' needs exactly one particle, got {count}")
        if self.mode == 'medium' and self.medium is None:
            raise root.error('medium', "mode 'medium' needs a medium section")
        if self.mode == 'nearfield':
            if self.nearfield.particle >= count:
                raise root.error('nearfield', f"particle index {self.nearfield.particle} out of "
                                              f"range for {count} particle(s)")
            spec = self._spec_of(self.nearfield.particle)
            if spec.shape == 'ball':
                raise root.error('nearfield', "the near-field particle needs a surface mesh; "
                                              "use shape 'sphere' instead of 'ball'")

    def _spec_of(self, index: int) -> ParticleSpec:
        if index < len(self.particles):
            return self.particles[index]
        return self.placement.template

    def with_overrides(self, output_dir: Optional[Path] = None, seed: Optional[int] = None,
                       strict_dominance: Optional[bool] = None) -> 'RunConfig':
        config = self
        if output_dir is not None:
            config = replace(config, output_dir=Path(output_dir))
        if seed is not None:
            config = replace(config, seed=int(seed))
        if strict_dominance:
            config = replace(config, solver=replace(config.solver, strict_dominance=True))
        return config


def load_run_config(path: Any, output_dir: Optional[Path] = None, seed: Optional[int] = None,
                    strict_dominance: Optional[bool] = None) -> RunConfig:
    """Parse a scene file; command-line overrides win over file values."""
    path = Path(path)
    data, lines = load_config(path)
    config = RunConfig.from_dict(data, lines, base_dir=path.resolve().parent, source=path)
    return config.with_overrides(output_dir, seed, strict_dominance)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _finite(value: Any) -> Any:
    """Builtins only; non-finite numbers become None."""
    value = to_plain(value)
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_finite(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


@dataclass
class RunReport:
    mode: str
    particles: int
    regime: Dict[str, Any] = field(default_factory=dict)
    dominance: Optional[Dict[str, Any]] = None
    solver: Dict[str, Any] = field(default_factory=dict)
    tensors: List[Dict[str, Any]] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return _finite(asdict(self))


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _particle_tensors(index: int, p: ParticleInstance) -> Dict[str, Any]:
    entry: Dict[str, Any] = {'particle': index, 'shape': p.shape, 'volume': p.volume,
                             'size': p.size, 'center': p.center}
    if p.alpha_info is not None:
        entry['alpha'] = p.alpha_info.to_dict()
    if p.beta_info is not None:
        entry['beta'] = p.beta_info.to_dict()
    return entry


class SceneRunner:
    """
    Run one scene end to end.

    run() and validate() return result dictionaries; scene and solver failures
    come back as {'success': False, 'error': ..., 'exit_code': ...}.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.ctx = config.wave
        self._templates: Dict[ParticleSpec, ParticleInstance] = {}
        self.timings: Dict[str, float] = {}

    @contextmanager
    def _timed(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    # -- particles ---------------------------------------------------------

    def _contrast(self, spec: ParticleSpec) -> MaterialContrast:
        return MaterialContrast.from_values(
            spec.eps, spec.mu, spec.sigma, omega=self.ctx.angular_frequency,
            eps0=self.ctx.eps0, mu0=self.ctx.mu0, skin=spec.skin)

    def _template(self, spec: ParticleSpec) -> ParticleInstance:
        key = spec.template_key
        if key not in self._templates:
            contrast = self._contrast(spec)
            if spec.shape == 'ball':
                particle = particle_from_ball((0.0, 0.0, 0.0), spec.size[0], contrast)
            else:
                if spec.shape == 'mesh':
                    mesh = load_mesh(spec.path)
                else:
                    size = spec.size[0] if spec.shape == 'sphere' else spec.size
                    mesh = make_canonical_mesh(spec.shape, size, refinement=spec.refinement)
                solver = self.config.solver
                _LOGGER.info("polarizability of a %s particle (%d panels)", spec.shape, mesh.n_panels)
                particle = particle_from_mesh(
                    mesh, contrast, spec=solver.quadrature, tol=solver.series_tol,
                    max_order=solver.max_order, shape=spec.shape,
                    panel_budget=solver.panel_budget, order=solver.order)
            self._templates[key] = particle
        return self._templates[key]

    def build_particles(self) -> List[ParticleInstance]:
        """Listed particles first, then placement copies, in a fixed order."""
        particles = []
        with self._timed('particles'):
            for spec in self.config.particles:
                template = self._template(spec)
                particles.append(template if spec.center is None else template.moved(spec.center))
            placement = self.config.placement
            if placement is not None:
                template = self._template(placement.template)
                for position in placement.positions(self.config.seed):
                    particles.append(template.moved(position))
        return particles

    # -- diagnostics -------------------------------------------------------

    def _regime(self, particles: Sequence[ParticleInstance]) -> Dict[str, Any]:
        options = self.config.regime
        report = regime_report(particles, self.ctx, options.ka_max, options.kd_min)
        if not report['regime_ok']:
            violations = sorted({v for row in report['particles'] for v in row['violations']})
            message = "far-zone regime violated: " + '; '.join(violations)
            report['violations'] = violations
            if options.strict:
                raise RegimeViolationError(message)
            _LOGGER.warning(message)
        return report

    def estimate_memory(self, particles: Sequence[ParticleInstance]) -> int:
        """Rough peak bytes of the dense arrays the run would allocate."""
        config = self.config
        estimate = 0
        for template in self._templates.values():
            if template.mesh is not None:
                estimate = max(estimate, 2 * 8 * template.mesh.n_panels ** 2)
        N = len(particles)
        if config.mode in ('nbody', 'nearfield') and 0 < N <= config.solver.dense_cap:
            estimate = max(estimate, 36 * 16 * N * N + 16 * (6 * N) ** 2)
        if config.mode == 'medium' and config.medium is not None:
            M = int(np.prod(config.medium.shape))
            estimate = max(estimate, 36 * 16 * M * M + 16 * (6 * M) ** 2)
        if config.mode == 'nearfield':
            mesh = particles[config.nearfield.particle].mesh
            if mesh is not None:
                estimate = max(estimate, 2 * 16 * (2 * mesh.n_panels) ** 2)
        return int(estimate)

    def _density(self) -> DensityField:
        medium = self.config.medium
        template = self._template(medium.template)
        if medium.count is not None:
            return uniform_density(medium.box, medium.shape, medium.count, template)
        indices, values, _ = read_voxel_csv(medium.density_path)
        grid = np.zeros(medium.shape)
        try:
            grid[tuple(indices.T)] = np.real(values[:, 0])
        except IndexError:
            raise ConfigError(f"density file {medium.density_path} does not fit the "
                              f"{medium.shape} grid", field='medium.density')
        return DensityField(box=np.array(medium.box), density=grid, templates=[template])

    def _medium_regime(self, density: DensityField) -> Dict[str, Any]:
        template = density.templates[0]
        peak = float(density.density.max())
        if peak == 0:
            return {'regime_ok': True, 'active_voxels': 0}
        spacing = peak ** (-1.0 / 3.0)
        report = farzone_error_report(template.size, spacing, self.ctx.k,
                                      self.config.regime.ka_max, self.config.regime.kd_min)
        report['active_voxels'] = int(np.count_nonzero(density.density))
        if not report['regime_ok'] and self.config.regime.strict:
            raise RegimeViolationError("far-zone regime violated: " + '; '.join(report['violations']))
        return report

    def validate(self) -> Dict[str, Any]:
        """Regime margins, dominance bound and memory estimate; nothing is solved or written."""
        try:
            particles = self.build_particles()
            result: Dict[str, Any] = {
                'success': True,
                'mode': self.config.mode,
                'particles': len(particles),
            }
            if self.config.mode == 'medium':
                density = self._density()
                result['regime'] = self._medium_regime(density)
            else:
                regime = regime_report(particles, self.ctx, self.config.regime.ka_max,
                                       self.config.regime.kd_min)
                regime['violations'] = sorted({v for row in regime['particles']
                                               for v in row['violations']})
                result['regime'] = regime
                result['dominance'] = dominance_bound(particles, self.ctx, self.config.solver.dense_cap)
            result['memory_bytes'] = self.estimate_memory(particles)
            result['tensors'] = [_particle_tensors(i, p) for i, p in enumerate(particles)
                                 if i < len(self.config.particles)]
            result['exit_code'] = 0
            return _finite(result)
        except ScatterwiseError as e:
            return self._failure(e)

    # -- run ---------------------------------------------------------------

    def _failure(self, error: ScatterwiseError) -> Dict[str, Any]:
        _LOGGER.error(str(error))
        result = error.to_dict()
        if isinstance(error, ConfigError):
            result['field'] = error.field
            result['line'] = error.line
        return result

    def run(self) -> Dict[str, Any]:
        config = self.config
        out = Path(config.output_dir)
        try:
            particles = self.build_particles() if config.mode != 'medium' else []
            report = RunReport(mode=config.mode, particles=len(particles))
            if config.mode != 'medium':
                report.regime = self._regime(particles)
            out.mkdir(parents=True, exist_ok=True)
            handler = getattr(self, f"_run_{config.mode}")
            with self._timed('solve'):
                artifacts = handler(particles, report, out)
            report.artifacts = [path.name for path in artifacts] + ['report.yaml']
            report.timings = dict(self.timings)
            dump_report(report.to_dict(), out / 'report.yaml')
            _LOGGER.info("wrote %d artifact(s) to %s", len(report.artifacts), out)
            return {
                'success': True,
                'report': report.to_dict(),
                'artifacts': [str(out / name) for name in report.artifacts],
                'output_dir': str(out),
                'exit_code': 0,
            }
        except ScatterwiseError as e:
            return self._failure(e)

    def _metadata(self, **extra: Any) -> Dict[str, Any]:
        return dict({'k': self.ctx.k, 'eps0': self.ctx.eps0, 'mu0': self.ctx.mu0}, **extra)

    def _run_tensors(self, particles: List[ParticleInstance], report: RunReport,
                     out: Path) -> List[Path]:
        artifacts = []
        for i, p in enumerate(particles):
            entry = _particle_tensors(i, p)
            report.tensors.append(entry)
            meta = self._metadata(particle=i, shape=p.shape, volume=p.volume)
            for name, tensor, info in (('alpha', p.alpha, p.alpha_info), ('beta', p.beta, p.beta_info)):
                if info is not None:
                    meta.update(order=info.order, error_estimate=info.error_estimate)
                artifacts.append(write_tensor_csv(tensor, out / f"particle{i}_{name}.csv",
                                                  dict(meta, tensor=name)))
        return artifacts

    def _run_single(self, particles: List[ParticleInstance], report: RunReport,
                    out: Path) -> List[Path]:
        """Far-field pattern of one particle over the plane of incidence and polarization."""
        p = particles[0]
        report.tensors.append(_particle_tensors(0, p))
        incident = self.config.incident
        local = incident.at(p.center[None, :], self.ctx)[0]
        d = incident.direction
        axis = np.real(incident.polarization)
        if np.linalg.norm(axis) < 1e-12:
            axis = np.imag(incident.polarization)
        axis = axis / np.linalg.norm(axis)

        thetas = np.linspace(0.0, np.pi, self.config.angles)
        directions = np.cos(thetas)[:, None] * d[None, :] + np.sin(thetas)[:, None] * axis[None, :]
        values = np.zeros((len(thetas), 6), dtype=complex)
        mismatch = 0.0
        for row, n in enumerate(directions):
            frame = ScatterFrame.from_directions(d, n)
            S_E = s_matrix_E(frame.to_local(p.alpha), frame.to_local(p.beta), frame, self.ctx, p.volume)
            E = apply_s_matrix_E(S_E, frame, local[:3])
            values[row] = np.concatenate([E, h_from_e(E, frame, self.ctx)])
            operator = s_operator(p.alpha, p.beta, n, self.ctx, p.volume).apply(local)
            scale = max(float(np.abs(operator).max()), 1e-300)
            mismatch = max(mismatch, float(np.abs(operator - values[row]).max()) / scale)
        report.solver = {'route': 'single', 'angles': len(thetas)}
        report.diagnostics = {'route_mismatch': mismatch}
        path = write_table_csv(out / 'far_field.csv', ['theta', 'n1', 'n2', 'n3'],
                               np.hstack([thetas[:, None], directions]), values, FIELD_COLUMNS,
                               self._metadata(volume=p.volume))
        return [path]

    def _solve_scene(self, particles: List[ParticleInstance], report: RunReport):
        solver = self.config.solver
        report.dominance = dominance_bound(particles, self.ctx, solver.dense_cap)
        fields = solve_fixed_point(particles, self.config.incident, self.ctx, tol=solver.tol,
                                   max_iter=solver.max_iter, strict=solver.strict_dominance,
                                   dense_cap=solver.dense_cap)
        report.solver = {
            'route': fields.route, 'iterations': fields.iterations, 'residual': fields.residual,
            'rate': fields.rate, 'condition': fields.condition,
        }
        return fields

    def _run_nbody(self, particles: List[ParticleInstance], report: RunReport,
                   out: Path) -> List[Path]:
        fields = self._solve_scene(particles, report)
        artifacts = []
        if particles:
            centers = centers_of(particles)
            real = np.hstack([np.arange(len(particles))[:, None], centers])
            artifacts.append(write_table_csv(out / 'local_fields.csv', ['index', 'x', 'y', 'z'],
                                             real, fields.values, FIELD_COLUMNS, self._metadata()))
        grid = self.config.grid
        if grid is not None:
            sampled = field_grid(grid.box, grid.resolution, fields, particles,
                                 self.config.incident, self.ctx, grid.margin)
            report.diagnostics['grid_points'] = len(sampled.points)
            report.diagnostics['grid_masked'] = int(sampled.mask.sum())
            artifacts.append(write_field_grid_csv(sampled, out / 'field_grid.csv',
                                                  self._metadata(shape=list(sampled.shape))))
        return artifacts

    def _run_medium(self, particles: List[ParticleInstance], report: RunReport,
                    out: Path) -> List[Path]:
        medium = self.config.medium
        density = self._density()
        template = density.templates[0]
        report.tensors.append(_particle_tensors(0, template))
        report.regime = self._medium_regime(density)
        q = q_from_density(density, self.ctx, medium.directions)
        solution = solve_effective_field(q, self.config.incident, self.ctx, tol=medium.tol,
                                         max_iter=medium.max_iter, method=medium.method,
                                         direct_cap=medium.direct_cap, lookup=medium.lookup)
        report.solver = {
            'route': solution.route, 'iterations': solution.iterations,
            'residual': solution.residual, 'kernel_norm': solution.kernel_norm,
            'active_voxels': len(solution.active), 'isotropic': q.isotropic,
        }
        peak = float(density.density.max())
        if peak > 0 and template.contrast is not None:
            c = template.contrast
            limit = limit_diagnostics(c.eps, c.eps0, c.sigma, c.omega,
                                      a_over_d=template.size * peak ** (1.0 / 3.0))
            report.diagnostics['limit'] = limit.to_dict()

        artifacts = [write_voxel_csv(
            out / 'effective_field.csv', density.indices, solution.values,
            self._metadata(origin=density.box[0], spacing=density.spacing, shape=list(density.shape),
                           route=solution.route, lookup=solution.lookup),
            columns=FIELD_COLUMNS)]
        if medium.probes:
            points = np.array(medium.probes)
            values = evaluate_effective_field(points, solution, q, self.config.incident, self.ctx)
            artifacts.append(write_table_csv(out / 'probes.csv', ['x', 'y', 'z'], points,
                                             values, FIELD_COLUMNS, self._metadata()))
        return artifacts

    def _run_nearfield(self, particles: List[ParticleInstance], report: RunReport,
                       out: Path) -> List[Path]:
        spec = self.config.nearfield
        target = particles[spec.particle]
        mesh = target.mesh
        if len(particles) > 1:
            fields = self._solve_scene(particles, report)
            exciting = exciting_field_from_scene(spec.particle, fields, particles,
                                                 self.config.incident, self.ctx)
        else:
            exciting = incident_excitation(self.config.incident, self.ctx)
        A = assemble_A(mesh, self.ctx, self.config.solver.quadrature)
        current = solve_current(mesh, A, exciting(mesh.centroids)[:, :3],
                                strict=self.config.regime.strict)
        residual = boundary_residual(mesh, current, exciting)
        report.diagnostics.update({
            'panels': mesh.n_panels, 'condition': current.condition,
            'system_residual': current.residual, 'boundary_residual': residual,
        })
        if spec.probes:
            points = np.array(spec.probes)
        else:
            reach = (1.0 + spec.offset) * target.size
            points = target.center[None, :] + reach * np.vstack([np.eye(3), -np.eye(3)])
        values = near_field(points, current, self.ctx, exciting)
        return [
            write_current_csv(current, out / 'currents.csv'),
            write_table_csv(out / 'near_field.csv', ['x', 'y', 'z'], points, values,
                            FIELD_COLUMNS, self._metadata(particle=spec.particle)),
        ]
