import numpy as np
import pytest

from qtape import data as D
from qtape import diag
from qtape import engine as E
from qtape import training as T


@pytest.fixture(scope="module")
def small_image_data():
    images, labels = D.synth_cifar_like(0, 400)
    images_f = (images.astype(np.float32) / 255.0 - 0.5) * 2
    return D.Dataset(images=images_f, labels=labels, num_classes=10)


@pytest.fixture(scope="module")
def small_net(small_image_data):
    spec = diag.make_sweep_spec(6, small_image_data.images.shape[1:],
                                base_channels=4)
    params = T.init_params(spec, 0)
    return spec, params


class TestGradErrorReport:
    def test_identity_quantizer_gives_zero_error(self, small_image_data,
                                                 small_net):
        spec, params = small_net
        rep = diag.grad_error_report(spec, params, small_image_data,
                                     bits=None, batches=3, batch_size=8)
        for r in rep.rows:
            assert r["approx_error"] == 0.0
            assert r["sgd_noise"] > 0.0

    def test_coarser_bits_larger_error(self, small_image_data, small_net):
        spec, params = small_net
        r8 = diag.grad_error_report(spec, params, small_image_data, bits=8,
                                    batches=4, batch_size=8)
        r4 = diag.grad_error_report(spec, params, small_image_data, bits=4,
                                    batches=4, batch_size=8)
        for a, b in zip(r4.rows, r8.rows):
            if a["kind"] == "conv" and a["layer"] > 0:
                assert a["approx_error"] >= b["approx_error"]

    def test_degenerate_noise_flagged(self, small_net):
        spec, params = small_net
        # dataset no larger than the batch: every sampled batch identical
        images, labels = D.synth_cifar_like(1, 8)
        ds = D.Dataset(images=(images.astype(np.float32) / 255.0),
                       labels=labels, num_classes=10)
        rep = diag.grad_error_report(spec, params, ds, bits=8, batches=2,
                                     batch_size=8)
        for r in rep.rows:
            assert r["degenerate"]
            assert r["ratio"] is None

    def test_deterministic_csv(self, small_image_data, small_net, tmp_path):
        spec, params = small_net
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        diag.grad_error_report(spec, params, small_image_data, bits=8,
                               batches=3, batch_size=8, csv_path=str(p1))
        diag.grad_error_report(spec, params, small_image_data, bits=8,
                               batches=3, batch_size=8, csv_path=str(p2))
        assert p1.read_bytes() == p2.read_bytes()


class TestSignAgreement:
    def test_unclipped_always_match(self, small_image_data, small_net):
        spec, params = small_net
        for bits in (1, 2, 4, 8):
            for row in diag.sign_agreement(spec, params, small_image_data,
                                           bits=bits, batch_size=8):
                assert row["unclipped_match"] == 1.0

    def test_identity_quantizer_full_agreement(self, small_image_data,
                                               small_net):
        spec, params = small_net
        rows = diag.sign_agreement(spec, params, small_image_data,
                                   bits=None, batch_size=8)
        assert rows
        assert all(r["overall_match"] == 1.0 for r in rows)

    def test_adversarial_shift_breaks_clipped_signs(self):
        # beta - 3|gamma| > 0 with negative entries: clipping flips signs
        rng = np.random.default_rng(0)
        from qtape.codec import dequantize, quantize
        gamma = np.array([0.1])
        beta = np.array([1.0])
        a = rng.standard_normal((64, 1)) * 0.5   # many negative entries
        tape = quantize(a, gamma, beta, 4)
        recon = dequantize(tape)
        match = ((a >= 0) == (recon >= 0))
        assert tape.clip_count > 0
        assert match.mean() < 1.0


class TestQuantizerCheck:
    @pytest.mark.parametrize("bits", [1, 2, 4, 8])
    def test_all_green(self, bits):
        r = diag.quantizer_check(bits, n=200_000, seed=1)
        assert r["ok"], r

    def test_runs_quickly(self):
        import time
        t0 = time.perf_counter()
        diag.quantizer_check(8, n=1_000_000)
        assert time.perf_counter() - t0 < 10.0


class TestDepthSweep:
    def test_shallow_errors_comparable(self, small_image_data):
        # depth 3 has exactly one approximated layer: no accumulation yet
        rows = diag.naive_vs_proposed_depth_sweep(
            [3], bits=8, dataset=small_image_data, batches=3,
            batch_size=8, base_channels=4)
        r0 = rows[0]
        assert r0["proposed_error"] > 0 and r0["naive_error"] > 0
        assert r0["naive_error"] < 30 * r0["proposed_error"]

    def test_csv_schema(self, small_image_data, tmp_path):
        path = tmp_path / "sweep.csv"
        diag.naive_vs_proposed_depth_sweep(
            [4], bits=8, dataset=small_image_data, batches=2, batch_size=8,
            base_channels=4, csv_path=str(path))
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "depth,proposed_error,naive_error"
        assert len(lines) == 2
