import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhflow.core.checkpoint import (
    Checkpoint, MAGIC, VERSION, decode, encode, load_checkpoint, save_checkpoint,
)
from rhflow.core.deturck import FlowState, cfl_dt, run
from rhflow.core.grid_tensor import GridGeometry, TargetSpec
from rhflow.core.homogeneous import ModelFamily, ModelKind, integrate_model
from rhflow.core.initial_data import build_initial
from rhflow.core.trajectory import CouplingSchedule
from rhflow.utils.error_handler import CheckpointError

SCHEDULE = CouplingSchedule.piecewise_linear([0.0, 1.0], [1.0, 0.5])


def _grid_state() -> FlowState:
    geom = GridGeometry(2, 16)
    target = TargetSpec.sphere()
    g, phi = build_initial(geom, target, 'bump', 0.05, 'perturbed-equator', 0.2, seed=4)
    return FlowState(0.0, g, phi, geom, target)


@pytest.fixture(scope='module')
def grid_bytes():
    rng = np.random.default_rng(11)
    rng.normal(size=3)
    return encode(Checkpoint.from_flow_state(_grid_state(), SCHEDULE, 1e-3, rng))


def test_encoding_is_byte_stable(grid_bytes):
    assert grid_bytes[:4] == MAGIC
    assert encode(decode(grid_bytes)) == grid_bytes


def test_grid_state_round_trip(grid_bytes):
    state = _grid_state()
    checkpoint = decode(grid_bytes)
    assert checkpoint.kind == 'grid'
    restored = checkpoint.to_flow_state()
    assert np.array_equal(restored.g, state.g)
    assert np.array_equal(restored.phi, state.phi)
    assert restored.geom == state.geom
    assert restored.target == state.target
    assert checkpoint.schedule() == SCHEDULE
    assert checkpoint.dt == 1e-3

    # the generator continues where the saved one stopped
    original = np.random.default_rng(11)
    original.normal(size=3)
    assert checkpoint.rng().normal() == original.normal()
    with pytest.raises(CheckpointError):
        checkpoint.to_hom_state()


def test_homogeneous_state_round_trip(tmp_path):
    model = ModelKind(ModelFamily.PRODUCT, normalized=True)
    traj = integrate_model(model, SCHEDULE, 0.2, 1e-2)
    path = str(tmp_path / 'hom.rhfc')
    save_checkpoint(Checkpoint.from_hom_state(traj.final, model, SCHEDULE, 1e-2, 20), path)
    state, restored_model = load_checkpoint(path).to_hom_state()
    assert restored_model == model
    assert (state.t, state.c, state.d) == (traj.final.t, traj.final.c, traj.final.d)
    assert state.alpha == SCHEDULE(state.t)


def test_rejects_empty_and_foreign_files(grid_bytes):
    with pytest.raises(CheckpointError) as excinfo:
        decode(b'')
    assert excinfo.value.offset == 0
    with pytest.raises(CheckpointError) as excinfo:
        decode(b'XXXX' + grid_bytes[4:])
    assert excinfo.value.offset == 0


def test_rejects_newer_version(grid_bytes):
    patched = grid_bytes[:4] + struct.pack('<H', VERSION + 1) + grid_bytes[6:]
    with pytest.raises(CheckpointError) as excinfo:
        decode(patched)
    assert excinfo.value.offset == 4
    assert 'version' in str(excinfo.value)


def test_rejects_unknown_kind_and_trailing_bytes(grid_bytes):
    with pytest.raises(CheckpointError) as excinfo:
        decode(grid_bytes[:6] + bytes([9]) + grid_bytes[7:])
    assert excinfo.value.offset == 6
    with pytest.raises(CheckpointError) as excinfo:
        decode(grid_bytes + b'\x00')
    assert excinfo.value.offset == len(grid_bytes)


@given(st.data())
@settings(max_examples=50, deadline=None)
def test_every_truncation_is_rejected(grid_bytes, data):
    cut = data.draw(st.integers(min_value=0, max_value=len(grid_bytes) - 1))
    with pytest.raises(CheckpointError):
        decode(grid_bytes[:cut])


def test_resumed_run_matches_uninterrupted_run(tmp_path):
    initial = _grid_state()
    dt = cfl_dt(initial.geom, initial.g)
    full = run(initial, SCHEDULE, 8 * dt, dt)

    head = run(initial, SCHEDULE, 4 * dt, dt)
    path = str(tmp_path / 'grid.rhfc')
    save_checkpoint(Checkpoint.from_flow_state(head.final, SCHEDULE, dt), path)
    loaded = load_checkpoint(path)
    tail = run(loaded.to_flow_state(), loaded.schedule(), 8 * dt, loaded.dt)

    assert tail.final.step == full.final.step == 8
    assert tail.final.t == pytest.approx(full.final.t)
    assert np.allclose(tail.final.g, full.final.g, rtol=0, atol=1e-12)
    assert np.allclose(tail.final.phi, full.final.phi, rtol=0, atol=1e-12)
