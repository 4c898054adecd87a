import numpy as np
import pytest

from metaformer import tensor as T
from metaformer.accounting import count_params
from metaformer.attention import bias_table_size
from metaformer.errors import ConfigError, ContractError, ShapeError
from metaformer.gradcheck import check_gradients, random_projection_loss
from metaformer.meta import MetaRecord, MetaSchema, collate_meta
from metaformer.model import AggregateLayer, MetaFormer, ModelConfig, StageConfig, preset, stage_shapes
from metaformer.tensor import Tensor

# stage rows (L, D) transcribed from the architecture table
TABLE = {
    "metaformer-0": [(3, 64), (2, 96), (3, 192), (5, 384), (2, 768)],
    "metaformer-1": [(3, 64), (2, 96), (6, 192), (14, 384), (2, 768)],
    "metaformer-2": [(3, 128), (2, 128), (6, 256), (14, 512), (2, 1024)],
}
KINDS = ["conv-stem", "mbconv", "mbconv", "transformer", "transformer"]

GEO_DT = MetaSchema.from_kinds("geo", "datetime")


def tiny(mode="parallel", meta=GEO_DT, **kw):
    return preset("tiny", class_token_mode=mode, meta=meta, num_classes=5, **kw)


def images(rng, b=2, size=64):
    return rng.standard_normal((b, 3, size, size))


def records(b):
    return [MetaRecord(geo=(10.0 * i, 20.0 - 7 * i), datetime=(1 + i, 3.5 * i)) for i in range(b)]


@pytest.mark.parametrize("name", sorted(TABLE))
def test_presets_match_table_field_by_field(name):
    cfg = preset(name)
    assert len(cfg.stages) == 5
    for st, (layers, dim), kind in zip(cfg.stages, TABLE[name], KINDS):
        assert st.kind == kind
        assert st.layers == layers
        assert st.dim == dim


def test_tiny_preset():
    cfg = preset("tiny")
    assert cfg.depths == (2, 1, 1, 2, 1)
    assert cfg.dims == (16, 24, 32, 64, 128)
    assert cfg.image_size == 64


def test_config_validation():
    with pytest.raises(ConfigError):
        preset("metaformer-9")
    with pytest.raises(ConfigError):
        preset("tiny", class_token_mode="final")
    with pytest.raises(ConfigError):
        preset("tiny", image_size=48)
    with pytest.raises(ConfigError):
        StageConfig("mbconv", 0, 8)
    stages = list(preset("tiny").stages)
    stages[1] = StageConfig("transformer", 1, 24)
    with pytest.raises(ConfigError):
        ModelConfig(tuple(stages))


def test_config_dict_round_trip_and_hash():
    cfg = tiny()
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.hash() == cfg.hash()
    assert tiny(mode="serial").hash() != cfg.hash()


def test_mf0_grids_at_224():
    shapes = stage_shapes(preset("metaformer-0"), 224)
    assert shapes[3] == (14, 384) and shapes[4] == (7, 768)


@pytest.mark.parametrize("mode", ["gap", "serial", "parallel"])
def test_tiny_forward_shapes(rng, mode):
    cfg = tiny(mode, meta=MetaSchema())
    model = MetaFormer(cfg, seed=0)
    st = model.forward_state(images(rng))
    assert st.logits.shape == (2, 5)
    n_extra = int(mode != "gap")
    assert st.s3_tokens.shape == (2, n_extra + cfg.grid(3) ** 2, 64)
    assert st.s4_tokens.shape == (2, n_extra + cfg.grid(4) ** 2, 128)
    assert (cfg.grid(3), cfg.grid(4)) == (4, 2)


def test_forward_errors(rng):
    model = MetaFormer(tiny(meta=MetaSchema()), seed=0)
    with pytest.raises(ShapeError):
        model(images(rng, size=32))
    with pytest.raises(ContractError):
        model(images(rng), collate_meta(records(2), GEO_DT))


def test_meta_path_is_live(rng):
    model = MetaFormer(tiny(), seed=0)
    model.eval()
    x = images(rng)
    with T.no_grad():
        with_meta = model(x, collate_meta(records(2), GEO_DT)).data
        null = model(x, None).data
    assert not np.allclose(with_meta, null)


def test_fully_masked_meta_equals_null_meta_bit_exact(rng):
    model = MetaFormer(tiny(), seed=0)
    model.eval()
    x = images(rng)
    mask = np.ones((2, GEO_DT.num_tokens), dtype=bool)
    with T.no_grad():
        masked = model(x, collate_meta(records(2), GEO_DT), mask).data
        null = model(x, None).data
    assert np.array_equal(masked, null)


def test_aggregate_selecting_second_slot_is_ln_of_z2(rng):
    agg = AggregateLayer(6, 8, 6, rng)
    agg.fuse_weight.data[:, 0, 0] = 0.0
    agg.fuse_weight.data[:, 0, 1] = 1.0
    agg.fuse_bias.data[...] = 0.0
    z1, z2 = rng.standard_normal((3, 6)), rng.standard_normal((3, 8))
    ref = agg.norm(Tensor(z2)).data
    np.testing.assert_allclose(agg(Tensor(z1), Tensor(z2)).data, ref, rtol=1e-13)


@pytest.mark.parametrize("fusion", ["depthwise", "dense"])
def test_aggregate_gradient(rng, fusion):
    agg = AggregateLayer(4, 6, 5, rng, fusion)
    z1 = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    z2 = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    probe = rng.standard_normal((2, 6))
    leaves = {"z1": z1, "z2": z2, **dict(agg.named_parameters())}
    res = check_gradients(lambda: random_projection_loss(agg(z1, z2), probe), leaves, rng=rng)
    assert res.worst < 1e-6
    with pytest.raises(ShapeError):
        agg(z2, z1)


@pytest.mark.parametrize("name,d4", [("metaformer-0", 768), ("metaformer-1", 768), ("metaformer-2", 1024)])
def test_aggregate_output_dim_is_d4(name, d4):
    cfg = preset(name)
    agg = AggregateLayer(cfg.dims[3], cfg.dims[4], cfg.agg_hidden, np.random.default_rng(0))
    out = agg(Tensor(np.zeros((1, cfg.dims[3]))), Tensor(np.ones((1, cfg.dims[4]))))
    assert out.shape == (1, d4)


def test_parallel_z1_gradient_survives_dead_s4_path(rng):
    model = MetaFormer(tiny(meta=MetaSchema()), seed=0)
    model.aggregate.fuse_weight.data[:, 0, 1] = 0.0  # z2 slot contributes nothing
    model.cls_token4.data[...] = 0.0
    loss = T.cross_entropy(model(images(rng)), np.array([0, 1]))
    loss.backward()
    assert np.linalg.norm(model.cls_token3.grad) > 0
    assert np.linalg.norm(model.aggregate.mlp.fc1.weight.grad) > 0


def test_count_params_equals_registry_walk():
    for mode in ("gap", "serial", "parallel"):
        for meta in (MetaSchema(), GEO_DT, MetaSchema.from_kinds("geo", ("attribute", {"dim": 5}),
                                                               ("text", {"vocab": 11, "max_len": 4}))):
            cfg = tiny(mode, meta=meta)
            walked = sum(p.data.size for _, p in MetaFormer(cfg, seed=0).named_parameters())
            assert count_params(cfg) == walked


def test_count_params_image_size_delta_is_bias_tables():
    cfg = tiny()
    heads3, heads4 = cfg.dims[3] // cfg.head_dim, cfg.dims[4] // cfg.head_dim
    for a, b in [(64, 128), (64, 96), (224, 384)]:
        expected = (heads3 * (bias_table_size(b // 16) - bias_table_size(a // 16))
                    + heads4 * (bias_table_size(b // 32) - bias_table_size(a // 32)))
        assert count_params(cfg, b) - count_params(cfg, a) == expected
    walked = sum(p.data.size for _, p in MetaFormer(cfg.with_(image_size=128), seed=0).named_parameters())
    assert walked == count_params(cfg, 128)


def test_seeded_build_is_deterministic():
    a = MetaFormer(tiny(), seed=3).state_dict()
    b = MetaFormer(tiny(), seed=3).state_dict()
    c = MetaFormer(tiny(), seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_load_state_dict_checks(rng):
    model = MetaFormer(tiny(), seed=0)
    state = model.state_dict()
    bad = dict(state)
    bad.pop("head.bias")
    with pytest.raises(ShapeError):
        model.load_state_dict(bad)
    bad = dict(state)
    bad["head.bias"] = np.zeros(7)
    with pytest.raises(ShapeError):
        model.load_state_dict(bad)


def test_f32_model_runs_in_f32(rng):
    with T.default_dtype(np.float32):
        model = MetaFormer(tiny(), seed=0)
        out = model(images(rng).astype(np.float32), collate_meta(records(2), GEO_DT))
    assert out.data.dtype == np.float32
