import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kfade import container
from kfade.container import ContainerError, decode, encode
from kfade.curvature import FisherMode, fit_curvature, identity_state, ihvp
from kfade.linalg import make_rng

from conftest import random_classification, random_net


class TestLayout:
    def test_scalar_vector_bytes(self):
        buf = encode({"w": np.array([1.0, 2.0])})
        expected = (
            b"KFT1" + struct.pack("<I", 1) + struct.pack("<H", 1) + b"w"
            + bytes([0, 1]) + struct.pack("<Q", 2) + struct.pack("<2d", 1.0, 2.0)
        )
        assert buf == expected

    def test_empty_container(self):
        assert encode({}) == b"KFT1\x00\x00\x00\x00"
        assert decode(b"KFT1\x00\x00\x00\x00") == ({}, None)

    def test_rank_zero(self):
        entries, _ = decode(encode({"s": np.float64(3.5)}))
        assert entries["s"].shape == () and entries["s"] == 3.5


class TestRejects:
    def test_bad_magic(self):
        with pytest.raises(ContainerError):
            decode(b"KFT2" + encode({})[4:])

    def test_unknown_dtype(self):
        buf = bytearray(encode({"w": np.ones(2)}))
        buf[4 + 4 + 2 + 1] = 7
        with pytest.raises(ContainerError, match="dtype"):
            decode(bytes(buf))

    @pytest.mark.parametrize("cut", [1, 8, 13])
    def test_truncated(self, cut):
        buf = encode({"w": np.ones((2, 3))})
        with pytest.raises(ContainerError):
            decode(buf[:-cut])

    def test_trailing_bytes(self):
        with pytest.raises(ContainerError):
            decode(encode({"w": np.ones(1)}) + b"\x00")

    def test_duplicate_names(self):
        one = encode({"w": np.ones(1)})
        body = one[8:]
        with pytest.raises(ContainerError):
            decode(b"KFT1" + struct.pack("<I", 2) + body + body)

    def test_reserved_meta_name(self):
        with pytest.raises(ContainerError):
            encode({"__meta__": np.ones(1)}, {"a": 1})


@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12).filter(lambda s: s != "__meta__"),
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
        max_size=4,
    )
)
def test_round_trip_bit_exact(entries):
    back, meta = decode(encode(entries, {"k": [1, "x"]}))
    assert meta == {"k": [1, "x"]}
    assert set(back) == set(entries)
    for name, arr in entries.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == np.ascontiguousarray(arr).tobytes()


class TestTypedHelpers:
    def test_checkpoint_round_trip(self, tmp_path):
        net, ckpt = random_net(0)
        container.save_checkpoint(tmp_path / "c.kft", ckpt, net)
        back = container.load_checkpoint(tmp_path / "c.kft")
        assert back.digest() == ckpt.digest()

    def test_wrong_artifact(self, tmp_path):
        net, ckpt = random_net(0)
        container.save_checkpoint(tmp_path / "c.kft", ckpt, net)
        with pytest.raises(ContainerError):
            container.load_curvature(tmp_path / "c.kft")

    @pytest.mark.parametrize("kind", ["identity", "diagonal", "kfac", "ekfac", "exact_dense"])
    def test_curvature_round_trip_gives_identical_ihvp(self, tmp_path, kind):
        net, ckpt = random_net(1, (4, 5, 3))
        data = random_classification(1, 20)
        if kind == "identity":
            state = identity_state(net)
        else:
            state = fit_curvature(
                net, ckpt, data, kind, make_rng(1, 3), FisherMode("monte_carlo", 2)
            )
        container.save_curvature(tmp_path / "f.kft", state)
        back = container.load_curvature(tmp_path / "f.kft")
        assert back.kind == state.kind
        rng = make_rng(1, 70)
        g = {l: rng.normal(size=state.shapes[l]) for l in state.target_layers}
        for lam in (0.1, 1e-6):
            a, b = ihvp(state, g, lam), ihvp(back, g, lam)
            for l in g:
                assert a[l].tobytes() == b[l].tobytes()

    def test_identity_holds_metadata_only(self, tmp_path):
        net, _ = random_net(0)
        container.save_curvature(tmp_path / "i.kft", identity_state(net))
        entries, meta = container.read(tmp_path / "i.kft")
        assert entries == {}
        assert meta["kind"] == "identity" and meta["artifact"] == "curvature"
