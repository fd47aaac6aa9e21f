import numpy as np
import pytest

from rdae import checkpoint as ckpt
from rdae.detector import frame_error
from rdae.model import ConfigError, Conv2d, ModelConfig, ResidualUnit, build, encode, forward, param_count
from rdae.synth import SceneSpec, render_frame
from rdae.tensor import RngState, ShapeError, Tensor, adam_step, grad_check, mse_loss
from rdae.trainer import TrainConfig, fit

SMALL = ModelConfig(input_size=16, levels=2, channels_per_level=(4, 8))


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def shape_sum_oracle(cfg: ModelConfig) -> int:
    """Parameter count walked from the layer layout, independent of the Module tree."""
    k, ch = cfg.filter_size, cfg.channels_per_level
    bn = lambda c: 2 * c  # noqa: E731
    unit = lambda c: 3 * (conv_params(c, c, k) + bn(c))  # noqa: E731
    total = conv_params(cfg.input_channels, ch[0], k) + bn(ch[0])
    for lvl in range(cfg.levels):
        nxt = ch[lvl + 1] if lvl + 1 < cfg.levels else ch[-1]
        total += cfg.units_per_level * unit(ch[lvl]) + conv_params(ch[lvl], nxt, k) + bn(nxt)
        total += conv_params(nxt, ch[lvl], k) + bn(ch[lvl]) + cfg.units_per_level * unit(ch[lvl])
    return total + conv_params(ch[0], cfg.input_channels, 1)


def warm(model, size=None, seed=0):
    """One train-mode pass so batch-norm running statistics exist, then infer mode."""
    size = size or model.config.input_size
    model.train()
    model.reconstruct(np.random.default_rng(seed).random((2, 3, size, size)).astype(np.float32))
    return model.eval()


def zero_(module):
    for p in module.parameters():
        p.data[...] = 0.0


@pytest.fixture(scope="module")
def default_model():
    return warm(build(ModelConfig(), 0))


@pytest.fixture
def frames():
    return np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32)


class TestBuild:
    def test_default_layout(self, default_model):
        assert len(default_model.encoder) == 4 and len(default_model.decoder) == 4
        assert default_model.config.bottleneck_size == 8

    def test_minimal_bottleneck(self):
        m = warm(build(ModelConfig(input_size=2, levels=1, channels_per_level=(2,)), 0))
        assert encode(m, np.zeros((1, 3, 2, 2), np.float32)).shape == (1, 2, 1, 1)

    def test_seeded_init_is_bit_identical(self):
        a, b = build(SMALL, 5), build(SMALL, 5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()

    def test_different_seeds_differ(self):
        a, b = build(SMALL, 1), build(SMALL, 2)
        assert a.stem.conv.weight.data.tobytes() != b.stem.conv.weight.data.tobytes()

    @pytest.mark.parametrize("changes,field", [
        ({"input_size": 100}, "input_size"),
        ({"channels_per_level": (16, 32)}, "channels_per_level"),
        ({"filter_size": 4}, "filter_size"),
        ({"levels": 0}, "levels"),
    ])
    def test_invalid_config_names_field(self, changes, field):
        with pytest.raises(ConfigError) as info:
            build(ModelConfig(**changes), 0)
        assert info.value.field == field

    def test_unknown_config_field_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depth": 3})


class TestParamCount:
    def test_single_unit_conv(self):
        assert param_count(Conv2d(RngState(0), 1, 1, 1)) == 2

    def test_default_matches_shape_sum(self, default_model):
        assert param_count(default_model) == shape_sum_oracle(ModelConfig()) == 1_670_115

    @pytest.mark.parametrize("cfg", [SMALL, ModelConfig(input_size=32, levels=3, channels_per_level=(3, 5, 7),
                                                        units_per_level=2, filter_size=5)])
    def test_other_configs_match_shape_sum(self, cfg):
        assert param_count(build(cfg, 0)) == shape_sum_oracle(cfg)

    def test_doubling_widths_roughly_quadruples(self):
        base = ModelConfig()
        wide = ModelConfig(channels_per_level=tuple(2 * c for c in base.channels_per_level))
        ratio = shape_sum_oracle(wide) / shape_sum_oracle(base)
        assert 3.8 < ratio < 4.1
        assert param_count(build(wide, 0)) == shape_sum_oracle(wide)


class TestForward:
    @pytest.mark.parametrize("batch", [1, 7, 64])
    def test_shape_preserved(self, batch):
        m = warm(build(SMALL, 0))
        x = np.random.default_rng(batch).random((batch, 3, 16, 16)).astype(np.float32)
        y = m.reconstruct(x)
        assert y.shape == x.shape and np.all(np.isfinite(y))

    def test_zero_head_gives_zero_output(self, frames):
        m = build(SMALL, 3)
        zero_(m.head)
        assert np.all(m.reconstruct(frames) == 0)

    @pytest.mark.parametrize("batch", [1, 2])
    def test_graph_free_path_matches_recorded_path(self, batch):
        # wide second level so both the weight-folding and output-scaling branches run
        m = warm(build(ModelConfig(input_size=16, levels=2, channels_per_level=(4, 32)), 1))
        m.head.weight.data[...] = np.random.default_rng(2).normal(0, 0.1, m.head.weight.shape)
        x = np.random.default_rng(batch).random((batch, 3, 16, 16)).astype(np.float32)
        recorded = m(Tensor(x)).data
        np.testing.assert_allclose(m.reconstruct(x), recorded, rtol=1e-4, atol=1e-5)
        assert np.abs(recorded).max() > 0.1

    def test_default_latent_shape(self, default_model):
        x = np.random.default_rng(0).random((1, 3, 128, 128)).astype(np.float32)
        z = encode(default_model, x).data
        assert z.shape == (1, 128, 8, 8)
        assert z.size == 8192 < x.size == 49152
        np.testing.assert_array_equal(z, encode(default_model, x.copy()).data)

    @pytest.mark.parametrize("shape", [(1, 3, 32, 32), (1, 1, 16, 16), (3, 16, 16)])
    def test_wrong_input_shape_rejected(self, shape):
        with pytest.raises(ShapeError):
            build(SMALL, 0)(np.zeros(shape, np.float32))

    def test_decoder_mirrors_encoder(self, frames):
        m = build(ModelConfig(input_size=16, levels=3, channels_per_level=(4, 6, 8)), 0)
        trace = {}
        m(frames, trace)
        for lvl in range(3):
            assert trace[f"decoder.{lvl}.out"].shape == trace[f"encoder.{lvl}.skip"].shape
        assert trace["latent"].shape == (2, 8, 2, 2)


class TestResidualIdentity:
    @pytest.mark.parametrize("seed", range(3))
    def test_zeroed_unit_is_identity(self, seed):
        unit = ResidualUnit(RngState(seed), 4, 4, SMALL)
        zero_(unit)
        for layer in unit.branch:
            layer.bn.stats.mean[...] = 0.0
            layer.bn.stats.var[...] = 1.0
            layer.bn.stats.tracked = 1
            layer.bn.training = False
        x = Tensor(np.random.default_rng(seed).normal(size=(2, 4, 8, 8)).astype(np.float32))
        assert unit(x).data.tobytes() == x.data.tobytes()

    def test_every_unit_in_model_is_identity_when_zeroed(self, frames):
        m = build(SMALL, 0)
        units = [u for lvl in [*m.encoder, *m.decoder] for u in lvl.units]
        assert units and all(u.projection is None for u in units)
        for u in units:
            zero_(u)
            x = Tensor(np.random.default_rng(1).normal(size=(2, u.branch[0].conv.weight.shape[1], 4, 4)))
            np.testing.assert_array_equal(u(x).data, x.data)

    def test_zeroed_outer_decoder_map_passes_skip_through(self, frames):
        m = build(SMALL, 0)
        zero_(m.decoder[0].up)
        trace = {}
        m(frames, trace)
        assert trace["decoder.0.sum"].tobytes() == trace["encoder.0.skip"].tobytes()


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_composed_model_and_loss(self, seed):
        cfg = ModelConfig(input_size=16, levels=2, channels_per_level=(3, 4))
        m = build(cfg, seed)
        rng = np.random.default_rng(seed)
        m.head.weight.data[...] = rng.normal(0, 0.5, m.head.weight.shape).astype(np.float32)
        # float64 copies so finite differences resolve below the tolerance
        for p in m.parameters():
            p.data = p.data.astype(np.float64)
        target = rng.random((2, 3, 16, 16))
        # a small step keeps central differences from straddling ReLU kinks
        err = grad_check(lambda x: mse_loss(m(x), Tensor(target)), [rng.random((2, 3, 16, 16))],
                         eps=1e-5, seed=seed)
        assert err < 1e-3

    def test_overfit_single_frame(self):
        # a rendered scene without sensor grain: per-frame noise has nothing to compress
        cfg = ModelConfig(input_size=32, levels=2, channels_per_level=(8, 16))
        frame = (render_frame(SceneSpec(seed=1, size=32, grain=0.0), 0).transpose(2, 0, 1)[None] / 255).astype(np.float32)
        start = frame_error(frame[0], build(cfg, 0).reconstruct(frame)[0])
        result = fit(frame, build(cfg, 0), TrainConfig(learning_rate=0.01, batch_size=1, max_epochs=50,
                                                       record_time=False))
        final = frame_error(frame[0], result.model.reconstruct(frame)[0])
        assert final * 10 <= start
        assert result.history[-1].mean_mse < 0.1 * result.history[0].mean_mse


class TestCheckpoint:
    @pytest.fixture
    def trained(self, frames):
        m = build(SMALL, 0)
        for _ in range(2):
            mse_loss(m(frames), Tensor(frames)).backward()
            adam_step(m.parameters())
        return m.eval()

    def test_roundtrip_is_bit_identical(self, trained, frames, tmp_path):
        path = tmp_path / "m.ckpt"
        ckpt.save_checkpoint(trained, path)
        loaded = ckpt.load_checkpoint(path)
        assert loaded.reconstruct(frames).tobytes() == trained.reconstruct(frames).tobytes()
        assert ckpt.to_bytes(loaded) == path.read_bytes()
        for (_, a), (_, b) in zip(trained.named_stats(), loaded.named_stats()):
            assert a.mean.tobytes() == b.mean.tobytes() and a.tracked == b.tracked

    def test_loaded_model_scores_each_frame_alone(self, trained, frames):
        loaded = ckpt.from_bytes(ckpt.to_bytes(trained))
        stats = [s.mean.copy() for _, s in loaded.named_stats()]
        whole = loaded.reconstruct(frames)
        single = np.concatenate([loaded.reconstruct(frames[i : i + 1]) for i in range(len(frames))])
        np.testing.assert_allclose(whole, single, atol=1e-5)
        assert all(np.array_equal(a, s.mean) for a, (_, s) in zip(stats, loaded.named_stats()))

    def test_layout_header(self, trained):
        data = ckpt.to_bytes(trained)
        assert data[:4] == b"RDAE" and data[4:8] == (1).to_bytes(4, "little")

    @pytest.mark.parametrize("offset", [20, 500, -100, -2])
    def test_single_byte_corruption_detected(self, trained, offset):
        data = bytearray(ckpt.to_bytes(trained))
        data[offset] ^= 0x40
        with pytest.raises(ckpt.ChecksumError):
            ckpt.from_bytes(bytes(data))

    def test_version_mismatch(self, trained):
        data = bytearray(ckpt.to_bytes(trained))
        data[4:8] = (999).to_bytes(4, "little")
        with pytest.raises(ckpt.VersionError, match="999"):
            ckpt.from_bytes(bytes(data))

    @pytest.mark.parametrize("keep", [3, 10, 200, -4, -1])
    def test_truncation_detected(self, trained, keep):
        data = ckpt.to_bytes(trained)
        with pytest.raises(ckpt.TruncatedCheckpointError):
            ckpt.from_bytes(data[:keep])

    def test_diagnostics_are_distinct(self):
        kinds = {ckpt.ChecksumError, ckpt.VersionError, ckpt.TruncatedCheckpointError}
        assert len(kinds) == 3 and all(issubclass(k, ckpt.CheckpointError) for k in kinds)

    def test_forward_wrapper(self, trained, frames):
        np.testing.assert_array_equal(forward(trained, frames).data, trained(Tensor(frames)).data)
