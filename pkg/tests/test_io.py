import struct
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from flowebm.diagnostics import ChainEnsemble, autocorrelation, gelman_rubin
from flowebm.energy import MLPEnergy
from flowebm.flow import FlowModel
from flowebm.io import (
    Checkpoint,
    ChainFormatError,
    CheckpointError,
    checkpoint_extras,
    decode_checkpoint,
    dump_chains,
    encode_checkpoint,
    load_chains,
    load_checkpoint,
    load_into,
    read_checkpoint,
    read_table,
    save_checkpoint,
    write_table,
)

from .helpers import perturbed_flow

finite = st.floats(allow_nan=False, allow_infinity=True, width=64)
tensor = arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=finite)
names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12).filter(
    lambda s: not s.startswith("__"))


def records(raw):
    """Independent walk over the record headers: list of (name, dtype, shape)."""
    count = struct.unpack_from("<I", raw, 8)[0]
    pos, out = 12, []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        dtype, rank = raw[pos], raw[pos + 1]
        shape = struct.unpack_from(f"<{rank}I", raw, pos + 2)
        pos += 2 + 4 * rank
        pos += (8 if dtype == 0 else 1) * int(np.prod(shape, dtype=np.int64))
        out.append((name, dtype, shape))
    assert pos == len(raw)
    return out


class TestCheckpointFormat:
    def test_header_layout(self):
        raw = encode_checkpoint(Checkpoint("flow", {"dim": 2}, OrderedDict(w=np.arange(6.0).reshape(2, 3))))
        assert raw[:4] == b"FEBM"
        assert struct.unpack_from("<II", raw, 4) == (1, 3)
        assert records(raw)[-1] == ("w", 0, (2, 3))
        # payload is row-major little-endian float64
        assert raw[-48:] == np.arange(6.0).astype("<f8").tobytes()

    @settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(st.dictionaries(names, tensor, max_size=5))
    def test_round_trip_is_lossless(self, tensors):
        ckpt = Checkpoint("energy:mlp", {"k": [1, 2]}, OrderedDict(tensors))
        raw = encode_checkpoint(ckpt)
        back = decode_checkpoint(raw)
        assert back.kind == ckpt.kind and back.config == ckpt.config
        assert list(back.tensors) == list(tensors)
        for k, v in tensors.items():
            assert back.tensors[k].shape == v.shape
            assert back.tensors[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()
        assert encode_checkpoint(back) == raw

    def test_unknown_version_rejected(self):
        raw = bytearray(encode_checkpoint(Checkpoint("flow", {})))
        raw[4:8] = struct.pack("<I", 2)
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(raw))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + bytes(8))

    def test_truncation_names_record(self):
        raw = encode_checkpoint(Checkpoint("flow", {}, OrderedDict(alpha=np.ones(3), beta=np.ones(4))))
        with pytest.raises(CheckpointError, match="beta"):
            decode_checkpoint(raw[:-5])
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(raw + b"\x00")
        for cut in range(4, len(raw)):
            with pytest.raises(CheckpointError):
                decode_checkpoint(raw[:cut])

    def test_unknown_dtype(self):
        raw = bytearray(encode_checkpoint(Checkpoint("flow", {}, OrderedDict(w=np.ones(1)))))
        raw[-8 - 4 - 2] = 7
        with pytest.raises(CheckpointError, match="dtype"):
            decode_checkpoint(bytes(raw))


class TestModelCheckpoints:
    def test_flow_bitwise(self, tmp_path):
        flow = perturbed_flow(3, depth=2, seed=1)
        path = tmp_path / "flow.ckpt"
        save_checkpoint(path, flow)
        back = load_checkpoint(path)
        assert isinstance(back, FlowModel) and back.initialized
        for (n1, p1), (n2, p2) in zip(flow.named_parameters(), back.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
        save_checkpoint(tmp_path / "again.ckpt", back)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_energy_with_extras(self, tmp_path):
        e = MLPEnergy(2, hidden=(4, 3), seed=2)
        path = tmp_path / "e.ckpt"
        save_checkpoint(path, e, {"bias": np.array(-0.25)})
        back = load_checkpoint(path)
        x = np.random.default_rng(0).standard_normal((4, 2))
        np.testing.assert_array_equal(back.value(x), e.value(x))
        assert checkpoint_extras(read_checkpoint(path))["bias"] == -0.25

    def test_depth_mismatch_no_partial_load(self, tmp_path):
        path = tmp_path / "d6.ckpt"
        save_checkpoint(path, perturbed_flow(2, depth=6, seed=0))
        target = FlowModel(2, depth=8, width=16, seed=5)
        before = [p.data.copy() for p in target.parameters()]
        with pytest.raises(CheckpointError, match="mismatch"):
            load_into(target, path)
        assert all(np.array_equal(a, p.data) for a, p in zip(before, target.parameters()))

    def test_width_mismatch_is_shape_error(self, tmp_path):
        path = tmp_path / "w.ckpt"
        save_checkpoint(path, FlowModel(2, depth=2, width=8))
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_into(FlowModel(2, depth=2, width=16), path)


def _ensemble(m, n, d, stride=1, seed=0, space="z"):
    rng = np.random.default_rng(seed)
    return ChainEnsemble(
        rng.standard_normal((m, n, d)) * 10 ** rng.uniform(-5, 5),
        np.arange(1, n + 1) * stride,
        rng.standard_normal((m, n)),
        rng.uniform(size=(m, n)) < 0.6,
        rng.uniform(0.01, 1, size=(m, n)),
        space=space,
    )


class TestChainDumps:
    @settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31),
           st.sampled_from("zx"))
    def test_round_trip_is_lossless(self, tmp_path, m, n, d, stride, seed, space):
        ens = _ensemble(m, n, d, stride, seed, space)
        path = tmp_path / "chains.csv"
        assert dump_chains(path, ens) == m * n
        back = load_chains(path)
        assert back.space == space
        for field in ("positions", "steps", "energy", "accepted", "step_size"):
            assert getattr(back, field).tobytes() == getattr(ens, field).tobytes()

    def test_diagnostics_identical_after_round_trip(self, tmp_path):
        ens = _ensemble(4, 50, 2)
        dump_chains(tmp_path / "c.csv", ens)
        back = load_chains(tmp_path / "c.csv")
        assert gelman_rubin(back).rhat.tobytes() == gelman_rubin(ens).rhat.tobytes()
        assert autocorrelation(back, 10).mean.tobytes() == autocorrelation(ens, 10).mean.tobytes()

    def test_single_row(self, tmp_path):
        assert dump_chains(tmp_path / "one.csv", _ensemble(1, 1, 2)) == 1
        lines = (tmp_path / "one.csv").read_text().splitlines()
        assert lines[0] == "chain,step,accepted,step_size,energy,z0,z1"
        assert len(lines) == 2

    def test_row_count_for_strided_run(self, tmp_path):
        # 64 chains, 2000 steps recorded every 5th step
        ens = ChainEnsemble(np.zeros((64, 400, 2)), np.arange(5, 2001, 5), np.zeros((64, 400)),
                            np.ones((64, 400), bool), np.ones((64, 400)))
        assert dump_chains(tmp_path / "big.csv", ens) == 25_600
        assert load_chains(tmp_path / "big.csv").positions.shape == (64, 400, 2)

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("chain,step,accepted,size,energy,z0\n0,1,1,0.1,0.0,0.5\n")
        with pytest.raises(ChainFormatError, match="header"):
            load_chains(path)
        path.write_text("chain,step,accepted,step_size,energy,z0,x1\n")
        with pytest.raises(ChainFormatError):
            load_chains(path)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("chain,step,accepted,step_size,energy,z0\n0,1,1,0.1,0.0,0.5\n0,2,1,0.1,0.0\n")
        with pytest.raises(ChainFormatError, match="line 3"):
            load_chains(path)

    def test_unequal_chains(self, tmp_path):
        path = tmp_path / "uneq.csv"
        path.write_text("chain,step,accepted,step_size,energy,z0\n0,1,1,0.1,0,0\n0,2,1,0.1,0,0\n1,1,1,0.1,0,0\n")
        with pytest.raises(ChainFormatError):
            load_chains(path)


def test_table_round_trip(tmp_path):
    cols = {"a": [1, 2, 3], "b": [0.1, 1e-300, -2.5e10]}
    write_table(tmp_path / "t.csv", cols)
    back = read_table(tmp_path / "t.csv")
    np.testing.assert_array_equal(back["b"], cols["b"])
    with pytest.raises(ValueError):
        write_table(tmp_path / "u.csv", {"a": [1], "b": [1, 2]})
