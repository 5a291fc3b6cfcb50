"""
File formats: scene configs, tensor/field/voxel/current CSVs
"""

from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import toml
import yaml

from .errors import ConfigError, InvalidArgumentError

PathLike = Union[str, Path]

_FMT = '%.17g'


def _header(metadata: Optional[Dict[str, Any]]) -> str:
    if not metadata:
        return ''
    return yaml.safe_dump(_plain(metadata), sort_keys=True, default_flow_style=True,
                          width=10 ** 6).strip()


def _plain(value: Any) -> Any:
    """Convert numpy and complex values into YAML-safe builtins."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        value = complex(value)
        if value.imag == 0:
            return float(value.real)
        return [float(value.real), float(value.imag)]
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    return value


def to_plain(value: Any) -> Any:
    return _plain(value)


def _read_header(path: Path) -> Dict[str, Any]:
    with open(path, 'r') as f:
        first = f.readline()
    if first.startswith('# '):
        try:
            loaded = yaml.safe_load(first[2:])
        except yaml.YAMLError:
            return {}
        return loaded if isinstance(loaded, dict) else {}
    return {}


def _interleave(values: np.ndarray) -> np.ndarray:
    """(..., n) complex -> (..., 2n) real as re, im pairs."""
    values = np.asarray(values, dtype=complex)
    out = np.empty(values.shape[:-1] + (2 * values.shape[-1],))
    out[..., 0::2] = values.real
    out[..., 1::2] = values.imag
    return out


def _deinterleave(values: np.ndarray) -> np.ndarray:
    return values[..., 0::2] + 1j * values[..., 1::2]


def write_tensor_csv(tensor: Any, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Complex matrix, one row per line as re,im pairs, with a metadata comment line."""
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(tensor, dtype=complex))
    np.savetxt(path, _interleave(matrix), delimiter=',', fmt=_FMT, header=_header(metadata))
    return path


def read_tensor_csv(path: PathLike) -> Tuple[np.ndarray, Dict[str, Any]]:
    path = Path(path)
    data = np.atleast_2d(np.loadtxt(path, delimiter=',', comments='#'))
    if data.shape[1] % 2:
        raise InvalidArgumentError(f"'{path}' does not hold re,im pairs")
    return _deinterleave(data), _read_header(path)


_FIELD_COLUMNS = ['x', 'y', 'z', 'mask'] + [
    f"{part} {name}" for name in ('E1', 'E2', 'E3', 'H1', 'H2', 'H3') for part in ('Re', 'Im')]


def write_field_grid_csv(grid, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """x,y,z,mask,Re E1,Im E1,...,Im H3 per grid point."""
    path = Path(path)
    table = np.hstack([grid.points, grid.mask[:, None].astype(float), _interleave(grid.values)])
    header = ','.join(_FIELD_COLUMNS)
    if metadata:
        header = _header(metadata) + '\n' + header
    np.savetxt(path, table, delimiter=',', fmt=_FMT, header=header)
    return path


def read_field_grid_csv(path: PathLike) -> Dict[str, np.ndarray]:
    data = np.atleast_2d(np.loadtxt(path, delimiter=',', comments='#'))
    return {
        'points': data[:, :3],
        'mask': data[:, 3].astype(bool),
        'values': _deinterleave(data[:, 4:]),
    }


def write_voxel_csv(path: PathLike, indices: np.ndarray, values: np.ndarray,
                    metadata: Dict[str, Any], columns: Optional[Sequence[str]] = None) -> Path:
    """
    ix,iy,iz,value... rows plus a YAML sidecar (same stem, .yaml) holding the
    grid origin, spacing and k. Complex values are written as re,im pairs.
    """
    path = Path(path)
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    complex_values = np.iscomplexobj(values)
    body = _interleave(values) if complex_values else values.astype(float)
    if columns is None:
        columns = [f"value{i}" for i in range(values.shape[1])]
    if complex_values:
        columns = [f"{part} {c}" for c in columns for part in ('Re', 'Im')]
    table = np.hstack([np.asarray(indices, dtype=float), body])
    np.savetxt(path, table, delimiter=',', fmt=_FMT, header=','.join(['ix', 'iy', 'iz'] + list(columns)))
    sidecar = dict(metadata)
    sidecar['complex'] = bool(complex_values)
    with open(path.with_suffix('.yaml'), 'w') as f:
        yaml.safe_dump(_plain(sidecar), f, sort_keys=True)
    return path


def read_voxel_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray, Dict[str, Any]]:
    path = Path(path)
    data = np.atleast_2d(np.loadtxt(path, delimiter=',', comments='#'))
    metadata: Dict[str, Any] = {}
    sidecar = path.with_suffix('.yaml')
    if sidecar.exists():
        with open(sidecar, 'r') as f:
            metadata = yaml.safe_load(f) or {}
    indices = data[:, :3].astype(np.int64)
    values = data[:, 3:]
    if metadata.get('complex'):
        values = _deinterleave(values)
    return indices, values, metadata


def write_current_csv(current, path: PathLike) -> Path:
    """panel_id,cx,cy,cz,Re j1,Im j1,...,Im j3."""
    path = Path(path)
    mesh = current.mesh
    table = np.hstack([np.arange(mesh.n_panels)[:, None], mesh.centroids,
                       _interleave(current.vectors)])
    header = 'panel_id,cx,cy,cz,' + ','.join(
        f"{part} j{i}" for i in (1, 2, 3) for part in ('Re', 'Im'))
    np.savetxt(path, table, delimiter=',', fmt=_FMT, header=header)
    return path


# ---------------------------------------------------------------------------
# Scene configuration files
# ---------------------------------------------------------------------------

def _yaml_lines(node, prefix: str = '', lines: Optional[Dict[str, int]] = None) -> Dict[str, int]:
    """Map dotted field paths (e.g. 'particles[2].radius') to 1-based line numbers."""
    if lines is None:
        lines = {}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            lines[path] = key.start_mark.line + 1
            _yaml_lines(value, path, lines)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = f"{prefix}[{i}]"
            lines[path] = item.start_mark.line + 1
            _yaml_lines(item, path, lines)
    return lines


def load_config(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, int]]:
    """Parse a YAML or TOML scene file into (data, field-path -> line)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    suffix = path.suffix.lower()
    if suffix in ('.yaml', '.yml'):
        try:
            data = yaml.safe_load(text)
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as e:
            mark = getattr(e, 'problem_mark', None)
            raise ConfigError(f"invalid YAML: {getattr(e, 'problem', None) or e}",
                              line=mark.line + 1 if mark is not None else None)
        lines = _yaml_lines(node) if node is not None else {}
    elif suffix == '.toml':
        try:
            data = toml.loads(text)
        except toml.TomlDecodeError as e:
            raise ConfigError(f"invalid TOML: {e.msg}", line=getattr(e, 'lineno', None))
        lines = {}
    else:
        raise ConfigError(f"unsupported config format '{suffix}' (use .yaml, .yml or .toml)")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("scene file must contain a mapping at the top level", line=1)
    return data, lines


def dump_report(report: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    with open(path, 'w') as f:
        yaml.safe_dump(_plain(report), f, sort_keys=False)
    return path


def write_table_csv(path: PathLike, columns: Sequence[str], real: np.ndarray,
                    values: Optional[np.ndarray] = None, value_columns: Sequence[str] = (),
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Real leading columns followed by complex columns as Re/Im pairs."""
    path = Path(path)
    blocks = [np.atleast_2d(np.asarray(real, dtype=float))]
    names = list(columns)
    if values is not None:
        blocks.append(_interleave(np.atleast_2d(values)))
        names += [f"{part} {c}" for c in value_columns for part in ('Re', 'Im')]
    header = ','.join(names)
    if metadata:
        header = _header(metadata) + '\n' + header
    np.savetxt(path, np.hstack(blocks), delimiter=',', fmt=_FMT, header=header)
    return path


def read_table_csv(path: PathLike) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=',', comments='#'))
