import math

import numpy as np
import pytest

from memvae import tensor as T
from memvae.distributions import make_rng
from memvae.estimators import multi_sample_bound
from memvae.memory import MemoryBuffer
from memvae.models import (BaselineVAE, MemVAEModel, SoftAttentionModel, elbo_terms, generate, joint_sample,
                           marginal_log_likelihood_exact, soft_forward)
from memvae.tensor import Tensor

from conftest import binary, small_spec


def _freeze_gaussian_head(mlp, bias):
    last = mlp.layers[-1]
    last.W.data[:] = 0.0
    last.b.data[:] = bias


class TestJointSample:
    def test_deterministic(self, small_model):
        x = binary(make_rng(1), 16)
        s1, s2 = joint_sample(small_model, x, make_rng(5)), joint_sample(small_model, x, make_rng(5))
        assert s1.a.tolist() == s2.a.tolist()
        np.testing.assert_array_equal(s1.z.data, s2.z.data)
        np.testing.assert_array_equal(s1.log_w.data, s2.log_w.data)

    def test_single_slot(self, rng):
        model = MemVAEModel(small_spec(), rng, MemoryBuffer(binary(rng, (1, 16))))
        s = joint_sample(model, binary(rng, 16), rng)
        assert s.log_q_a.item() == 0.0 and s.log_p_a.item() == 0.0

    def test_log_weight_finite(self, small_model, rng):
        s = small_model.sample_posterior(binary(rng, (8, 16)), 4, rng)
        for t in (s.log_q_a, s.log_q_z, s.log_p_a, s.log_p_z, s.log_p_x):
            assert t.shape == (8, 4) and np.all(np.isfinite(t.data))
        assert np.all(np.isfinite(np.exp(s.log_w.data)))

    def test_address_frequencies(self, small_model, rng):
        x = binary(rng, (1, 16))
        n = 100_000
        with T.no_grad():
            s = small_model.sample_posterior(x, n, rng)
        freq = np.bincount(s.a[0], minlength=len(small_model.mem)) / n
        p = s.q_a.probs[0]
        assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n))

    def test_decoder_depends_on_memory(self, small_model, rng):
        z = Tensor(rng.standard_normal((1, 3)))
        m = Tensor(binary(rng, (1, 16)))
        m2 = Tensor(1.0 - m.data)
        assert np.abs(small_model.decode(z, m).data - small_model.decode(z, m2).data).max() > 1e-6

    def test_rows_are_b_major(self, small_model, rng):
        X = binary(rng, (3, 16))
        a = np.array([[0, 1], [2, 3], [4, 0]])
        s = small_model.sample_posterior(X, 2, rng, addresses=a)
        np.testing.assert_array_equal(s.a, a)
        one = small_model.sample_posterior(X[1:2], 1, None, addresses=[[3]], eps=np.zeros((1, 3)))
        both = small_model.sample_posterior(X, 2, None, addresses=a, eps=np.zeros((6, 3)))
        assert one.log_p_x.item() == pytest.approx(both.log_p_x.data[1, 1], abs=1e-12)

    def test_memory_required(self, rng):
        with pytest.raises(RuntimeError):
            MemVAEModel(small_spec(), rng).sample_posterior(binary(rng, (1, 16)), 1, rng)


class TestElboTerms:
    def test_identity_holds(self, small_model, rng):
        X = binary(rng, (10, 16))
        s = small_model.sample_posterior(X, 3, rng)
        t = elbo_terms(small_model, X, s)
        np.testing.assert_allclose(t.elbo.data, (t.recon - t.kl_a - t.kl_z).data, atol=1e-12)

    def test_q_equals_p_gives_recon(self, rng):
        model = MemVAEModel(small_spec(), rng, MemoryBuffer(binary(rng, (1, 16))))
        bias = np.r_[np.full(3, 0.3), np.full(3, -0.2)]
        _freeze_gaussian_head(model.prior_net_z, bias)
        _freeze_gaussian_head(model.posterior_net_z, bias)
        X = binary(rng, (4, 16))
        t = elbo_terms(model, X, model.sample_posterior(X, 2, rng))
        np.testing.assert_allclose(t.kl_a.data, 0.0, atol=1e-15)
        np.testing.assert_allclose(t.kl_z.data, 0.0, atol=1e-15)
        np.testing.assert_array_equal(t.elbo.data, t.recon.data)

    def test_kls_nonnegative(self, small_model, rng):
        X = binary(rng, (6, 16))
        t = elbo_terms(small_model, X, small_model.sample_posterior(X, 2, rng))
        assert np.all(t.kl_a.data >= -1e-12) and np.all(t.kl_z.data >= -1e-12)


class TestMarginal:
    def test_zero_z_exact(self, rng):
        model = MemVAEModel(small_spec(z_dim=0), rng, MemoryBuffer(binary(rng, (4, 16))))
        x = binary(rng, (2, 16))
        got = marginal_log_likelihood_exact(model, x, 1)
        with T.no_grad():
            _, prior, _ = model.address_dists(x)
            logits = model.decode(None, model.mem.entries).data
        lp = logits @ x.T - np.logaddexp(0, logits).sum(1, keepdims=True)  # [|M|, B]
        ref = np.log(np.sum(prior.probs[:, None] * np.exp(lp), axis=0))
        np.testing.assert_allclose(got, ref, rtol=1e-12)

    def test_single_slot_is_iwae(self, rng):
        model = MemVAEModel(small_spec(), rng, MemoryBuffer(binary(rng, (1, 16))))
        x = binary(rng, (1, 16))
        got = marginal_log_likelihood_exact(model, x, 50, make_rng(3))[0]
        eps = make_rng(3).standard_normal((50, 3))
        with T.no_grad():
            lw = model.sample_posterior(x, 50, None, addresses=np.zeros((1, 50)), eps=eps).log_w.data[0]
        ref = np.logaddexp.reduce(lw) - math.log(50)
        assert got == pytest.approx(ref, abs=1e-10)

    def test_upper_bounds_elbo(self, small_model, rng):
        x = binary(rng, (1, 16))
        oracle = marginal_log_likelihood_exact(small_model, x, 2000, make_rng(1))[0]
        elbos = np.array([multi_sample_bound(small_model, x, 1, make_rng(100 + i)).bound[0] for i in range(50)])
        assert elbos.mean() <= oracle + 3 * elbos.std(ddof=1) / math.sqrt(50)


class TestGenerate:
    def test_deterministic(self, small_model):
        np.testing.assert_array_equal(generate(small_model, make_rng(2), 6), generate(small_model, make_rng(2), 6))

    def test_empty(self, small_model, rng):
        assert generate(small_model, rng, 0).shape == (0, 16)

    def test_binary_and_probs(self, small_model, rng):
        x = generate(small_model, rng, 5)
        assert set(np.unique(x)) <= {0.0, 1.0}
        p = generate(small_model, rng, 5, probs=True)
        assert np.all((p > 0) & (p < 1))

    def test_saturated_decoder_reproduces_entry(self, rng):
        # a decoder that copies m_a with large gain mimics the recall optimum
        spec = small_spec(dec_hidden=())
        model = MemVAEModel(spec, rng, MemoryBuffer(binary(rng, (3, 16))))
        dec = model.decoder.layers[0]
        dec.W.data[:] = 0.0
        dec.W.data[3:, :] = 60.0 * np.eye(16)
        dec.b.data[:] = -30.0
        x = generate(model, rng, 4, address=1, z_mode="mean")
        np.testing.assert_array_equal(x, np.tile(model.mem.entries.data[1], (4, 1)))


class TestSoftModel:
    def _model(self, rng, n_mem=4):
        model = SoftAttentionModel(small_spec(), rng)
        model.set_memory(binary(rng, (n_mem, 16)))
        return model

    def test_equal_logits_give_mean(self, rng):
        model = self._model(rng)
        last = model.attn_query.layers[-1]
        last.W.data[:] = 0.0
        last.b.data[:] = 0.0
        z = Tensor(rng.standard_normal((3, 3)))
        np.testing.assert_allclose(model.readout(z).data, np.tile(model.mem.entries.data.mean(0), (3, 1)),
                                   atol=1e-14)

    def test_attention_sums_to_one(self, rng):
        att = self._model(rng).attention(Tensor(rng.standard_normal((5, 3)))).data
        np.testing.assert_allclose(att.sum(1), 1.0, atol=1e-12)

    def test_single_entry_readout(self, rng):
        model = self._model(rng, 1)
        z = Tensor(rng.standard_normal((2, 3)))
        np.testing.assert_allclose(model.readout(z).data, np.tile(model.mem.entries.data, (2, 1)), atol=1e-14)

    def test_soft_forward_decomposition(self, rng):
        model = self._model(rng)
        X = binary(rng, (4, 16))
        elbo, recon, kl_z = soft_forward(model, X, make_rng(1))
        np.testing.assert_allclose(elbo.data, (recon - kl_z).data)
        assert np.all(kl_z.data >= 0)


class TestBaselineVAE:
    def test_forward_shapes(self, rng):
        model = BaselineVAE(small_spec(), rng)
        out = model.forward(binary(rng, (3, 16)), 5, rng)
        assert out["log_w"].shape == (3, 5)
        assert np.all(np.isfinite(out["log_w"].data))

    def test_no_memory_parameters(self, rng):
        assert not any("mem" in n for n in BaselineVAE(small_spec(), rng).named_parameters())
