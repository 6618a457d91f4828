import numpy as np
import pytest

from quadranet import network as N
from quadranet.blocks import BlockSpec
from quadranet.config import ConfigError
from quadranet.tensor import ShapeError


def toy_spec(**kw):
    base = dict(base_channels=4, depths=(1, 1, 1, 1), block=BlockSpec("quadra", 3, 2), num_classes=4, input_size=32)
    base.update(kw)
    return N.NetworkSpec(**base)


def test_stage_geometry():
    spec = toy_spec()
    assert spec.stage_channels == [4, 8, 16, 32]
    assert spec.stage_sizes == [8, 4, 2, 1]


def test_forward_shape_and_determinism(rng):
    x = rng.normal(size=(3, 3, 32, 32))
    a = N.build(toy_spec(), seed=5).forward(x)
    b = N.build(toy_spec(), seed=5).forward(x)
    assert a.shape == (3, 4) and np.array_equal(a, b)
    assert not np.array_equal(a, N.build(toy_spec(), seed=6).forward(x))


def test_input_size_must_divide_by_32():
    with pytest.raises(ShapeError, match="32"):
        N.build(toy_spec(input_size=48))


def test_wrong_input_shape(rng):
    with pytest.raises(ShapeError):
        N.build(toy_spec()).forward(rng.normal(size=(1, 3, 64, 64)))


def test_zero_trunk_gives_bias_logits(rng):
    net = N.build(toy_spec())
    net.params["head.bias"][:] = [1.0, 2.0, 3.0, 4.0]
    net.zero_trunk()
    out = net.forward(rng.normal(size=(2, 3, 32, 32)))
    assert np.allclose(out, [[1, 2, 3, 4]] * 2)


def test_preset_names_and_errors():
    assert "quadranet36-t" in N.preset_names()
    spec = N.preset("quadranet36-t")
    assert spec.depths == (3, 3, 27, 3) and spec.base_channels == 64
    with pytest.raises(ValueError, match="known"):
        N.preset("quadranet99-t")


def test_slots_override_depths():
    slots = [[BlockSpec("quadra", 3, 2)], [], [BlockSpec("identity"), BlockSpec("quadra", 5, 4)], []]
    spec = toy_spec(slots=slots)
    assert spec.depths == (1, 0, 2, 0)
    assert N.build(spec).forward(np.zeros((1, 3, 32, 32))).shape == (1, 4)


def test_from_dict_round_trip():
    spec = toy_spec()
    again = N.NetworkSpec.from_dict(spec.to_dict())
    assert again.to_dict() == spec.to_dict()


@pytest.mark.parametrize("doc,path", [
    ({"depths": [1, 2, 3]}, "network.depths"),
    ({"depths": [1, -1, 1, 1]}, "network.depths[1]"),
    ({"block": {"kind": "quadra", "size": 3}}, "network.block.size"),
    ({"base_channels": "wide"}, "network.base_channels"),
    ({"colour": 1}, "network.colour"),
])
def test_from_dict_reports_json_path(doc, path):
    with pytest.raises(ConfigError) as err:
        N.NetworkSpec.from_dict(doc, "network")
    assert err.value.path == path


def test_snapshot_round_trip(tmp_path, rng):
    net = N.build(toy_spec(), seed=2)
    for arr in net.params.values():
        arr += rng.normal(size=arr.shape)
    path = tmp_path / "m.qnet"
    N.save_snapshot(net, path, seed=2, meta={"note": "x"})
    back, header = N.load_snapshot(path)
    assert header["seed"] == 2 and header["meta"] == {"note": "x"}
    for name in net.params:
        assert np.array_equal(net.params[name], back.params[name])
    x = rng.normal(size=(2, 3, 32, 32))
    assert np.array_equal(net.forward(x), back.forward(x))


def test_snapshot_layout(rng):
    import json
    import struct
    net = N.build(toy_spec(depths=(0, 0, 0, 0)), seed=0)
    buf = N.snapshot_bytes(net, seed=0)
    assert buf[:4] == b"QNET"
    version, length = struct.unpack("<II", buf[4:12])
    assert version == 1
    header = json.loads(buf[12:12 + length])
    first_name, first_shape = header["params"][0]
    n0 = int(np.prod(first_shape))
    first = np.frombuffer(buf, "<f8", n0, 12 + length).reshape(first_shape)
    assert np.array_equal(first, net.params[first_name])
    assert len(buf) == 12 + length + 8 * net.num_params()


def test_snapshot_errors():
    buf = N.snapshot_bytes(N.build(toy_spec()), seed=0)
    with pytest.raises(N.SnapshotError, match="magic"):
        N.load_snapshot_bytes(b"XNET" + buf[4:])
    with pytest.raises(N.SnapshotError, match="payload"):
        N.load_snapshot_bytes(buf[:-8])
    with pytest.raises(N.SnapshotError, match="version"):
        N.load_snapshot_bytes(buf[:4] + (7).to_bytes(4, "little") + buf[8:])
