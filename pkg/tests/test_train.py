import numpy as np
import pytest

from lfg import nn, pcgan, train
from lfg.errors import ConfigError, DataError
from lfg.losses import LossWeights, make_extractor, reconstruction_loss
from lfg.train import AMSGrad, TrainConfig, amsgrad_step, batch_indices


class TestAMSGrad:
    def test_zero_gradient_leaves_params(self):
        p = nn.Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        opt = AMSGrad({"p": p}, lr=0.1)
        p.grad = np.zeros(2, dtype=np.float32)
        assert amsgrad_step(opt)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_scalar_recurrence_oracle(self):
        # g=1, fresh state, lr=0.1: m=0.5, v=0.001, vhat=0.001,
        # bias-corrected m_hat=1, v_hat=1 -> step = -0.1/(1+eps)
        p = nn.Tensor(np.array([0.0], dtype=np.float64), requires_grad=True)
        opt = AMSGrad({"p": p}, lr=0.1)
        p.grad = np.array([1.0])
        amsgrad_step(opt)
        np.testing.assert_allclose(opt.m["p"], [0.5], rtol=1e-12)
        np.testing.assert_allclose(opt.v["p"], [0.001], rtol=1e-9)
        np.testing.assert_allclose(opt.vhat["p"], [0.001], rtol=1e-9)
        np.testing.assert_allclose(p.data, [-0.1 / (1 + 1e-8)], rtol=1e-9)

    def test_vhat_monotone_nondecreasing(self, rng):
        p = nn.Tensor(rng.normal(size=8).astype(np.float32), requires_grad=True)
        opt = AMSGrad({"p": p}, lr=0.01)
        prev = opt.vhat["p"].copy()
        for _ in range(20):
            p.grad = rng.normal(size=8).astype(np.float32)
            amsgrad_step(opt)
            assert np.all(opt.vhat["p"] >= prev)
            prev = opt.vhat["p"].copy()

    def test_nonfinite_gradient_skips_whole_step(self):
        p = nn.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        q = nn.Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        opt = AMSGrad({"p": p, "q": q}, lr=0.1)
        p.grad = np.array([np.nan], dtype=np.float32)
        q.grad = np.array([1.0], dtype=np.float32)
        assert not amsgrad_step(opt)
        np.testing.assert_array_equal(p.data, [1.0])
        np.testing.assert_array_equal(q.data, [2.0])
        assert opt.skipped == 1 and opt.t == 0

    def test_no_bias_correction_variant(self):
        p = nn.Tensor(np.array([0.0]), requires_grad=True)
        opt = AMSGrad({"p": p}, lr=0.1, bias_correction=False)
        p.grad = np.array([1.0])
        amsgrad_step(opt)
        # uncorrected: step = -lr * m / (sqrt(vhat) + eps)
        expected = -0.1 * 0.5 / (np.sqrt(0.001) + 1e-8)
        np.testing.assert_allclose(p.data, [expected], rtol=1e-9)


class TestBatchIndices:
    def test_pure_function_of_step(self):
        a = batch_indices(3, 10, 4, 5)
        b = batch_indices(3, 10, 4, 5)
        assert a == b and len(a) == 4

    def test_epoch_shuffling_covers_all(self):
        seen = []
        for step in range(1, 6):
            seen.extend(batch_indices(0, 10, 2, step))
        assert sorted(seen) == sorted(range(10))

    def test_wraps_across_epoch_boundary(self):
        out = batch_indices(1, 5, 3, 2)  # positions 3..5 span two epochs
        assert len(out) == 3


def build_tiny(records):
    cfg = pcgan.GeneratorConfig(input_hw=(64, 64), stages=3, base_channels=4,
                                max_channels=16)
    gen = pcgan.build_generator(cfg, pcgan.InitSpec(seed=1))
    disc = pcgan.build_discriminator(pcgan.DiscriminatorConfig(base_channels=4),
                                     pcgan.InitSpec(seed=2))
    ext = make_extractor("random-pyramid", seed=3)
    return gen, disc, ext


class TestTrainStep:
    def test_loss_record_schema(self, lesioned_records):
        gen, disc, ext = build_tiny(lesioned_records)
        opt_g = AMSGrad(gen.parameters(), 1e-4)
        opt_d = AMSGrad(disc.parameters(), 1e-5)
        losses = train.train_step(gen, disc, lesioned_records, [0, 1], LossWeights(),
                                  opt_g, opt_d, ext, np.random.default_rng(0))
        d = losses.as_dict()
        assert set(d) == {"gan_d", "gan_g", "gp", "rec", "perc", "tex", "total"}
        assert all(np.isfinite(v) for v in d.values())

    def test_fixed_seed_identical_traces(self, lesioned_records):
        def run():
            gen, disc, ext = build_tiny(lesioned_records)
            opt_g = AMSGrad(gen.parameters(), 1e-4)
            opt_d = AMSGrad(disc.parameters(), 1e-5)
            rng = np.random.default_rng(9)
            out = []
            for step in range(1, 4):
                idx = batch_indices(9, len(lesioned_records), 2, step)
                out.append(train.train_step(gen, disc, lesioned_records, idx,
                                            LossWeights(), opt_g, opt_d, ext, rng).as_dict())
            return out

        a, b = run(), run()
        assert a == b

    def test_generator_grads_isolate_to_reconstruction(self, lesioned_records):
        """With zeroed critic weights and zero perceptual/texture weights,
        the generator gradient equals the reconstruction-loss gradient."""
        gen, disc, ext = build_tiny(lesioned_records)
        for p in disc.parameters().values():
            p.data = np.zeros_like(p.data)
        weights = LossWeights(perceptual=0.0, texture=0.0)

        imgs, known = train._batch_arrays(lesioned_records, [0, 1])
        x = nn.Tensor(imgs)
        x_hat = gen.forward(x, known, training=False)
        rec_only = reconstruction_loss(x, x_hat, known, weights.valid, weights.hole)
        rec_only.backward()
        ref_grads = {k: p.grad.copy() for k, p in gen.parameters().items()}
        for p in gen.parameters().values():
            p.grad = None

        opt_g = AMSGrad(gen.parameters(), lr=0.0)  # lr 0: observe grads only
        opt_d = AMSGrad(disc.parameters(), lr=0.0)
        # replicate the step's grad computation by hand to snapshot grads
        x_hat2 = gen.forward(x, known, training=False)
        from lfg.losses import LossParts, composite_image, perceptual_loss, texture_loss, total_loss
        z = composite_image(x, x_hat2, known)
        gan_g = nn.neg(nn.tmean(disc.forward(
            nn.Tensor(np.zeros((2, 1, 64, 64), dtype=np.float32)))))
        perc = perceptual_loss(x, x_hat2, z, ext)
        tex = texture_loss(x, x_hat2, z, ext)
        rec = reconstruction_loss(x, x_hat2, known, weights.valid, weights.hole)
        total = total_loss(LossParts(gan_g, rec, perc, tex), weights)
        total.backward()
        for k, p in gen.parameters().items():
            if "bn" in k and p.grad is None:
                continue
            np.testing.assert_allclose(p.grad, ref_grads[k], rtol=1e-4, atol=1e-7,
                                       err_msg=k)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_g=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch=0)


class TestTrainLoop:
    def _desk(self, tmp_path, records, iterations, seed=5, resume=None, sub="run"):
        gen, disc, ext = build_tiny(records)
        cfg = TrainConfig(iterations=iterations, batch=2, seed=seed,
                          checkpoint_every=5)
        out = tmp_path / sub
        telemetry = train.train_loop(cfg, records, gen, disc, ext, LossWeights(),
                                     out, resume_from=resume)
        return out, telemetry

    def test_zero_iterations_writes_initial_checkpoint_only(self, tmp_path, lesioned_records):
        out, telemetry = self._desk(tmp_path, lesioned_records, 0)
        ckpts = sorted(out.glob("checkpoint_*.lfgc"))
        assert len(ckpts) == 1 and ckpts[0].name == "checkpoint_0000000.lfgc"
        assert telemetry.read_text().splitlines() == [",".join(train.TELEMETRY_COLUMNS)]

    def test_no_lesions_rejected(self, tmp_path, phantom_records):
        healthy = [r for r in phantom_records if not r.has_lesion]
        gen, disc, ext = build_tiny(healthy)
        with pytest.raises(DataError):
            train.train_loop(TrainConfig(iterations=1), healthy, gen, disc, ext,
                             LossWeights(), tmp_path / "x")

    def test_resume_replays_uninterrupted_trace(self, tmp_path, lesioned_records):
        out_a, tel_a = self._desk(tmp_path, lesioned_records, 10, sub="full")
        out_b, _ = self._desk(tmp_path, lesioned_records, 5, sub="half")
        # resume from step 5 into a fresh loop for 5 more
        gen, disc, ext = build_tiny(lesioned_records)
        cfg = TrainConfig(iterations=10, batch=2, seed=5, checkpoint_every=5)
        tel_b = train.train_loop(cfg, lesioned_records, gen, disc, ext, LossWeights(),
                                 out_b, resume_from=out_b / "checkpoint_0000005.lfgc")
        rows_a = tel_a.read_text().splitlines()
        rows_b = tel_b.read_text().splitlines()
        assert rows_a[0] == rows_b[0]
        assert rows_a[6:] == rows_b[6:]  # steps 6..10 identical

    def test_telemetry_columns_and_determinism(self, tmp_path, lesioned_records):
        _, tel_a = self._desk(tmp_path, lesioned_records, 3, sub="a")
        _, tel_b = self._desk(tmp_path, lesioned_records, 3, sub="b")
        assert tel_a.read_bytes() == tel_b.read_bytes()
        header = tel_a.read_text().splitlines()[0]
        assert header == "step,gan_d,gan_g,gp,rec,perc,tex,total,wall_ms"
