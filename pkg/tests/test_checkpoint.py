import numpy as np
import pytest

from scalecam.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from scalecam.layers import forward
from scalecam.scaling import ScalingCoefficients, build_network, compound_scale, format_plan, toy_b0
from scalecam.tensor import ShapeError, Tensor, rng, tensor_from_bytes


@pytest.fixture(scope="module")
def trained_like():
    net = build_network(toy_b0(3), seed=3)
    # perturb batch-norm statistics so buffers matter for the round trip
    g = rng(1)
    for leaf in net.leaves():
        if leaf.kind == "batchnorm":
            leaf.buffers["running_mean"] = g.normal(size=leaf.channels)
            leaf.buffers["running_var"] = g.uniform(0.5, 2.0, leaf.channels)
    return net


def test_round_trip_is_bit_exact(tmp_path, trained_like):
    ckpt = Checkpoint.from_network(trained_like, epoch=4, val_accuracy=0.875, rng_state="philox:3:5")
    path = tmp_path / "m.gsck"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert (loaded.epoch, loaded.val_accuracy, loaded.rng_state) == (4, 0.875, "philox:3:5")
    probe = Tensor(rng(2).random((2, 1, 32, 32)))
    assert np.array_equal(forward(loaded.to_network(), probe).data, forward(trained_like, probe).data)
    other = build_network(toy_b0(3), seed=99)
    load_checkpoint(path, other)
    assert np.array_equal(forward(other, probe).data, forward(trained_like, probe).data)


def test_layout(trained_like):
    ckpt = Checkpoint.from_network(trained_like)
    buf = checkpoint_bytes(ckpt)
    assert buf.startswith(MAGIC) and MAGIC.startswith(b"GSCK1")
    n = int.from_bytes(buf[6:14], "little")
    assert buf[14 : 14 + n].decode() == format_plan(trained_like.plan)
    # the final tensor in the file is the last state entry
    name, arr = ckpt.state[-1]
    tail = np.asarray(arr, dtype=np.float64).ravel()
    assert buf.endswith(tail.tobytes())
    assert parse_checkpoint(buf).plan_text == ckpt.plan_text


def test_scaled_plan_round_trip(tmp_path):
    plan = compound_scale(toy_b0(2), ScalingCoefficients(phi=1))
    net = build_network(plan, seed=0)
    save_checkpoint(Checkpoint.from_network(net), tmp_path / "s.gsck")
    again = load_checkpoint(tmp_path / "s.gsck").to_network()
    assert again.plan == plan and again.resolution == plan.resolution


def test_corruption_errors(trained_like):
    buf = checkpoint_bytes(Checkpoint.from_network(trained_like))
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XXXXX1" + buf[6:])
    with pytest.raises(CheckpointError, match="byte"):
        parse_checkpoint(buf[:-5])
    with pytest.raises(CheckpointError, match="byte"):
        parse_checkpoint(buf[:10])
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(buf + b"\0")


def test_mismatched_architecture_names_layer(trained_like):
    ckpt = Checkpoint.from_network(trained_like)
    with pytest.raises(ShapeError, match="logits"):
        ckpt.load_into(build_network(toy_b0(4)))
    wide = compound_scale(toy_b0(3), ScalingCoefficients(phi=2))
    with pytest.raises((ShapeError, ValueError), match="stem|block|top"):
        ckpt.load_into(build_network(wide))


def test_tensor_blocks_parse(trained_like):
    buf = checkpoint_bytes(Checkpoint.from_network(trained_like))
    ckpt = parse_checkpoint(buf)
    pos = len(buf) - sum(8 * (arr.ndim + 1) + arr.size * 8 for _, arr in ckpt.state)
    for _, arr in ckpt.state:
        t, pos = tensor_from_bytes(buf, pos)
        assert np.array_equal(t.data, arr)
    assert pos == len(buf)
