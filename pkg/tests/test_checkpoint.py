import struct

import numpy as np
import pytest

from dsod import checkpoint as C
from dsod.tensor import ParamStore


@pytest.fixture
def params(rng):
    p = ParamStore()
    p.add("cnn.w", rng.normal(size=(4, 3)))
    p.add("head.b", rng.normal(size=(5,)), frozen=True)
    p.add("foundation.w", rng.normal(size=(2, 2, 2)), locked=True)
    p.add("scalar", np.array(3.5))
    return p


META = {"stage": "adapt", "seed": 7, "w_star": [0.15, 0.15, 0.15], "iteration": 12}


class TestRoundTrip:
    def test_bit_exact(self, params):
        back, meta = C.decode(C.encode(params, META))
        assert list(back.keys()) == list(params.keys())
        for k, t in params.items():
            assert back[k].data.tobytes() == t.data.tobytes()
            assert back[k].data.shape == t.data.shape
        assert meta == META

    def test_flags_survive(self, params):
        back, _ = C.decode(C.encode(params))
        assert back.frozen == params.frozen and back.locked == params.locked

    def test_save_load_save(self, params, tmp_path):
        a = C.save_checkpoint(tmp_path / "a.dsod", params, META)
        back, meta = C.load_checkpoint(a)
        b = C.save_checkpoint(tmp_path / "b.dsod", back, meta)
        assert a.read_bytes() == b.read_bytes()

    def test_signed_zero_and_subnormal(self):
        p = ParamStore()
        p.add("x", np.array([-0.0, 5e-324, 1e-308, np.finfo(float).max]))
        back, _ = C.decode(C.encode(p))
        assert back["x"].data.tobytes() == p["x"].data.tobytes()


class TestErrors:
    def test_bad_magic(self, params):
        with pytest.raises(C.CorruptHeaderError):
            C.decode(b"XXXX" + C.encode(params)[4:])

    def test_unknown_version(self, params):
        buf = bytearray(C.encode(params))
        buf[4:8] = struct.pack("<I", C.VERSION + 1)
        with pytest.raises(C.UnsupportedVersionError):
            C.decode(bytes(buf))

    @pytest.mark.parametrize("cut", [1, 8, 100])
    def test_truncated(self, params, cut):
        with pytest.raises(C.TruncatedCheckpointError):
            C.decode(C.encode(params)[:-cut])

    def test_trailing_bytes(self, params):
        with pytest.raises(C.CorruptHeaderError):
            C.decode(C.encode(params) + b"\0")

    def test_distinct_error_types(self):
        kinds = {C.CorruptHeaderError, C.TruncatedCheckpointError, C.UnsupportedVersionError}
        assert all(issubclass(k, C.CheckpointError) for k in kinds)
        assert len({k.__name__ for k in kinds}) == 3
