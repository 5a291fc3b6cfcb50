"""
Tests for errors, helpers and file formats
"""

import logging

import numpy as np
import pytest

from scatterwise.utils.errors import (
    ConfigError, InvalidArgumentError, NonConvergenceError, OutOfRegionError, RegimeViolationError,
    SingularSystemError,
)
from scatterwise.utils.helpers import (
    as_complex, chunk_ranges, cross_matrix, get_threads, lu_with_condition, parallel_map,
    row_sum_norm, set_threads, setup_logging, unit,
)
from scatterwise.utils.io import (
    load_config, read_tensor_csv, read_voxel_csv, write_tensor_csv, write_voxel_csv,
)


def test_error_exit_codes():
    assert ConfigError("bad").exit_code == 2
    assert NonConvergenceError("slow", history=[1.0, 2.0]).exit_code == 3
    assert SingularSystemError("flat", condition=1e20).condition == 1e20
    assert RegimeViolationError("big").exit_code == 4
    assert OutOfRegionError("close", particle=3).particle == 3
    payload = RegimeViolationError("big").to_dict()
    assert payload == {'success': False, 'error': 'big', 'error_type': 'RegimeViolationError',
                       'exit_code': 4}


def test_config_error_location_prefix():
    error = ConfigError("must be positive", field='wave.k', line=3)
    assert str(error) == "[line 3, field 'wave.k'] must be positive"
    assert str(ConfigError("plain")) == "plain"


def test_as_complex():
    assert as_complex(2) == 2 + 0j
    assert as_complex([1.0, -2.0]) == 1 - 2j
    assert as_complex("3+4j") == 3 + 4j
    with pytest.raises(InvalidArgumentError):
        as_complex([1.0, 2.0, 3.0])


def test_vector_helpers():
    assert np.allclose(unit([0, 3, 4]), [0, 0.6, 0.8])
    with pytest.raises(InvalidArgumentError):
        unit([0, 0, 0])
    v, w = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.5, 2.0])
    assert np.allclose(cross_matrix(v) @ w, np.cross(v, w))
    assert row_sum_norm(np.array([[1, -2], [0.5, 0.5]])) == 3.0


def test_lu_condition():
    _, condition = lu_with_condition(np.diag([1.0, 10.0]))
    assert condition == pytest.approx(10.0)
    _, condition = lu_with_condition(np.zeros((2, 2)))
    assert condition == float('inf')


def test_threads_and_chunks():
    previous = get_threads()
    try:
        set_threads(3)
        assert parallel_map(lambda x: x * x, range(5)) == [0, 1, 4, 9, 16]
        with pytest.raises(InvalidArgumentError):
            set_threads(0)
    finally:
        set_threads(previous)
    assert list(chunk_ranges(5, 2)) == [(0, 2), (2, 4), (4, 5)]


def test_setup_logging_is_idempotent():
    logger = setup_logging(logging.DEBUG)
    setup_logging(logging.WARNING)
    assert logger.level == logging.WARNING
    assert len(logger.handlers) == 1


def test_tensor_csv(tmp_path):
    tensor = np.array([[1 + 2j, 0, 0], [0, 3, 0], [0, 0, -1j]])
    path = write_tensor_csv(tensor, tmp_path / "alpha.csv", {'k': 0.5, 'shape': 'sphere'})
    loaded, meta = read_tensor_csv(path)
    assert np.array_equal(loaded, tensor)
    assert meta == {'k': 0.5, 'shape': 'sphere'}


def test_voxel_csv_sidecar(tmp_path):
    indices = np.array([[0, 0, 0], [1, 2, 3]])
    values = np.array([[1 + 1j, 2], [3, 4 - 1j]])
    path = write_voxel_csv(tmp_path / "field.csv", indices, values, {'spacing': [1.0, 1.0, 1.0]})
    assert (tmp_path / "field.yaml").exists()
    read_indices, read_values, meta = read_voxel_csv(path)
    assert np.array_equal(read_indices, indices)
    assert np.array_equal(read_values, values)
    assert meta['complex'] is True


def test_load_config_line_numbers(tmp_path):
    path = tmp_path / "scene.yaml"
    path.write_text("mode: nbody\nwave:\n  k: 1.0\nparticles:\n  - shape: ball\n    radius: 0.1\n")
    data, lines = load_config(path)
    assert data['wave']['k'] == 1.0
    assert lines['wave.k'] == 3
    assert lines['particles[0]'] == 5
    assert lines['particles[0].radius'] == 6


def test_load_config_errors(tmp_path):
    broken = tmp_path / "broken.yaml"
    broken.write_text("mode: nbody\nwave: [k: 1\n")
    with pytest.raises(ConfigError) as info:
        load_config(broken)
    assert info.value.line is not None
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(listing)


def test_load_toml(tmp_path):
    path = tmp_path / "scene.toml"
    path.write_text('mode = "tensors"\n[wave]\nk = 0.5\n')
    data, lines = load_config(path)
    assert data == {'mode': 'tensors', 'wave': {'k': 0.5}}
    assert lines == {}


if __name__ == '__main__':
    pytest.main([__file__])
