import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

import network
from conftest import tiny_config
from network import tensor_engine as te
from network.baseline import SoftmaxClassifier, UnimodalDAE
from network.mynn import BatchNorm, Dropout, LayerSettings, set_rng
from network.xmodalnet import (ILModule, ModalityShape, SAModule, XModalNet, forward_full, forward_il,
                               forward_inference, forward_sa, init_params, lp_features)
from utils.errors import ContractError, DegenerateError, DimensionError, ParameterError, StateError


def _batch(shape, n=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    x_o = torch.rand(n, shape.d1, shape.patch, shape.patch, generator=g, dtype=te.DTYPE)
    x_t = torch.rand(n, shape.d2, generator=g, dtype=te.DTYPE)
    x_u = torch.rand(n, shape.d1, shape.patch, shape.patch, generator=g, dtype=te.DTYPE)
    return x_o, x_t, x_u


class TestForwardFull:

    def test_output_shapes(self, micro_net, micro_shape):
        x_o, x_t, x_u = _batch(micro_shape)
        out = forward_full(micro_net, x_o, x_t, x_u, mode='train')
        for stream in ('o', 't', 'u'):
            assert out['pred'][stream].shape == (4, 2)
            assert float((out['pred'][stream].sum(dim=1) - 1).abs().max()) < 1e-12
            z_real, z_fake = out['sa'][stream]
            assert z_real.shape == (4, 64) and z_fake.shape == (4, 64)
        assert out['recon']['o'].shape == x_o.shape
        assert out['recon']['u'].shape == x_u.shape
        assert out['recon']['t'].shape == x_t.shape
        assert out['tap']['o'].shape == (4, 128)
        assert out['trace'] is None

    def test_without_unlabeled_batch(self, micro_net, micro_shape):
        x_o, x_t, _ = _batch(micro_shape)
        out = forward_full(micro_net, x_o, x_t)
        assert 'u' not in out['pred'] and 'u' not in out['sa']

    def test_misaligned_rows(self, micro_net, micro_shape):
        x_o, x_t, _ = _batch(micro_shape)
        with pytest.raises(ContractError):
            forward_full(micro_net, x_o, x_t[:3])

    def test_wrong_band_count(self, micro_net, micro_shape):
        x_o, x_t, _ = _batch(micro_shape)
        with pytest.raises(DimensionError):
            forward_full(micro_net, x_o, x_t[:, :3])

    def test_trace_records_every_stream(self, micro_net, micro_shape):
        x_o, x_t, x_u = _batch(micro_shape)
        trace = forward_full(micro_net, x_o, x_t, x_u, trace=True)['trace']
        assert set(trace) == {'o', 't', 'u'}
        assert list(trace['o'])[0] == 'extractor'
        assert trace['o']['block'].shape == (4, 128)

    def test_sa_off_has_no_fake_stream(self, micro_shape):
        net = init_params(XModalNet(micro_shape, sa=False), te.RngState(0))
        x_o, x_t, _ = _batch(micro_shape)
        out = forward_full(net, x_o, x_t)
        assert out['sa']['o'][1] is None
        assert out['sa']['o'][0].shape == (4, 64)


class TestInferencePath:

    def test_matches_eval_forward(self, micro_net, micro_shape):
        x_o, x_t, _ = _batch(micro_shape)
        full = forward_full(micro_net, x_o, x_t, mode='eval')['pred']['o']
        assert torch.allclose(forward_inference(micro_net, x_o), full, atol=1e-12)

    def test_modality1_prediction_ignores_modality2(self, micro_net, micro_shape):
        x_o, x_t, _ = _batch(micro_shape)
        a = forward_full(micro_net, x_o, x_t, mode='eval')['pred']['o']
        b = forward_full(micro_net, x_o, 1.0 - x_t, mode='eval')['pred']['o']
        assert torch.equal(a, b)

    def test_batching_does_not_change_result(self, micro_net, micro_shape):
        x_o, _, _ = _batch(micro_shape, n=10)
        assert torch.allclose(forward_inference(micro_net, x_o, batch_size=3),
                              forward_inference(micro_net, x_o), atol=1e-12)

    def test_uninitialized_net(self, micro_shape):
        x_o, _, _ = _batch(micro_shape)
        with pytest.raises(StateError):
            forward_inference(XModalNet(micro_shape), x_o)

    def test_lp_features_shape(self, micro_net, micro_shape):
        x_o, _, _ = _batch(micro_shape, n=5)
        assert lp_features(micro_net, x_o, batch_size=2).shape == (5, 128)


class TestModules:

    def test_il_half_sums_both_perceptrons(self):
        il = ILModule().eval()
        x = torch.rand(3, 64, dtype=te.DTYPE)
        with torch.no_grad():
            assert torch.allclose(il.half(x, 1), il.MLP1(x) + il.MLP2(x))
            assert torch.allclose(il.half(x, 1, interactive=False), il.MLP1(x))
            both = il(x, x)
        assert both.shape == (3, 128)

    def test_o_and_u_share_blocks(self, micro_net):
        o, u = micro_net.stream_blocks('o'), micro_net.stream_blocks('u')
        for name in ('extractor', 'sa', 'proj', 'block', 'decoder'):
            assert o[name] is u[name]
        assert o['head'] is not u['head']
        assert o['discriminator'] is not u['discriminator']

    def test_parameter_groups_partition(self, micro_net):
        gen = set(id(p) for p in micro_net.generator_parameters())
        disc = set(id(p) for p in micro_net.discriminator_parameters())
        assert not gen & disc
        assert gen | disc == set(id(p) for p in micro_net.parameters())

    def test_toggles_change_layers_only(self, micro_shape):
        plain = XModalNet(micro_shape, LayerSettings(bn=False, dropout=0.0, eps=1e-5, momentum=0.99))
        assert not any(isinstance(m, (BatchNorm, Dropout)) for m in plain.modules())
        full = XModalNet(micro_shape)
        assert any(isinstance(m, BatchNorm) for m in full.modules())
        assert any(isinstance(m, Dropout) for m in full.modules())
        # IL and SA switch the forward pass, not the parameter set
        no_il_sa = XModalNet(micro_shape, il=False, sa=False)
        assert sum(p.numel() for p in no_il_sa.parameters()) == sum(p.numel() for p in full.parameters())

    def test_init_is_seeded(self, micro_shape):
        a = init_params(XModalNet(micro_shape), te.RngState(1)).state_dict()
        b = init_params(XModalNet(micro_shape), te.RngState(1)).state_dict()
        c = init_params(XModalNet(micro_shape), te.RngState(2)).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert not torch.equal(a['extractor1.conv1.0.weight'], c['extractor1.conv1.0.weight'])

    def test_dropout_draws_from_rng(self, micro_shape):
        net = init_params(XModalNet(micro_shape), te.RngState(0))
        x_o, x_t, _ = _batch(micro_shape)
        a = forward_full(net, x_o, x_t, rng=te.RngState(4))['pred']['o']
        b = forward_full(net, x_o, x_t, rng=te.RngState(4))['pred']['o']
        assert torch.equal(a, b)

    def test_shape_validation(self):
        with pytest.raises(ParameterError):
            ModalityShape(d1=2, d2=4, patch=4, num_classes=2).validate()


class TestFactory:

    def test_get_net_from_config(self):
        config = tiny_config({'model.sa': 'off'})
        net = network.get_net(config)
        assert isinstance(net, XModalNet)
        assert net.shape == ModalityShape(d1=4, d2=16, patch=3, num_classes=3)
        assert not net.sa_enabled and net.il_enabled

    def test_leaky_slope_reaches_discriminators(self):
        net = network.get_net(tiny_config({'model.leaky_slope': '0.1'}))
        assert all(d.net[1].slope == 0.1 for d in net.discriminators.values())

    def test_get_net_dae(self):
        assert isinstance(network.get_net(tiny_config(), arch='dae'), UnimodalDAE)


class TestBaselines:

    def test_softmax_classifier_separates_blobs(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(0, 0.1, (20, 3)), rng.normal(3, 0.1, (20, 3))])
        y = np.repeat([0, 1], 20)
        clf = SoftmaxClassifier(3, 2).fit(x, y)
        assert (clf.predict(x) == y).all()
        assert np.allclose(clf.predict_proba(x).sum(axis=1), 1.0)

    def test_softmax_classifier_single_class(self):
        with pytest.raises(DegenerateError):
            SoftmaxClassifier(2, 2).fit(np.zeros((4, 2)), np.zeros(4, dtype=int))

    def test_dae_shapes(self, micro_shape):
        dae = UnimodalDAE(micro_shape).init_params(te.RngState(0))
        x_o, _, _ = _batch(micro_shape)
        set_rng(dae, te.RngState(1))
        dae.train()
        assert dae.reconstruct(x_o).shape == x_o.shape
        assert dae.predict(x_o).shape == (4, 2)

    def test_dae_uninitialized(self, micro_shape):
        with pytest.raises(StateError):
            UnimodalDAE(micro_shape).predict(_batch(micro_shape)[0])


NO_DROPOUT = LayerSettings(bn=True, dropout=0.0, eps=1e-5, momentum=0.99)


class TestSAAndIL:

    def _sa(self):
        return init_params(SAModule(8, NO_DROPOUT), te.RngState(0)).eval()

    def _il(self, seed=0):
        return init_params(ILModule(NO_DROPOUT), te.RngState(seed)).eval()

    def test_sa_output_width(self):
        z1, z2, z = forward_sa(self._sa(), torch.rand(3, 8, dtype=te.DTYPE))
        assert z1.shape == z2.shape == (3, 64)
        assert torch.equal(z, torch.cat([z1, z2], dim=1))

    def test_sa_identical_generators_agree(self):
        sa = self._sa()
        sa.G2.load_state_dict(sa.G1.state_dict())
        with torch.no_grad():
            z1, z2, _ = forward_sa(sa, torch.rand(5, 8, dtype=te.DTYPE))
        assert torch.equal(z1, z2)

    def test_sa_width_mismatch(self):
        with pytest.raises(DimensionError):
            forward_sa(self._sa(), torch.rand(3, 7, dtype=te.DTYPE))

    def test_sa_gradient(self):
        sa = self._sa()
        x = torch.rand(4, 8, dtype=te.DTYPE, requires_grad=True)
        assert gradcheck(lambda inp: forward_sa(sa, inp)[2], (x,))

    def test_il_matches_four_mlp_evaluations(self):
        il = self._il()
        x1, x2 = torch.rand(3, 64, dtype=te.DTYPE), torch.rand(3, 64, dtype=te.DTYPE)
        with torch.no_grad():
            z = forward_il(il, x1, x2)
            expected = torch.cat([il.MLP1(x1) + il.MLP2(x1), il.MLP2(x2) + il.MLP1(x2)], dim=1)
        assert float((z - expected).abs().max()) < 1e-12

    def test_il_identical_mlps_double(self):
        il = self._il()
        il.MLP2.load_state_dict(il.MLP1.state_dict())
        x = torch.rand(3, 64, dtype=te.DTYPE)
        with torch.no_grad():
            assert torch.allclose(forward_il(il, x, x)[:, :64], 2 * il.MLP1(x), atol=1e-15)

    def test_il_swapping_roles_swaps_halves(self):
        il, swapped = self._il(), self._il(seed=1)
        swapped.MLP1.load_state_dict(il.MLP2.state_dict())
        swapped.MLP2.load_state_dict(il.MLP1.state_dict())
        x1, x2 = torch.rand(2, 64, dtype=te.DTYPE), torch.rand(2, 64, dtype=te.DTYPE)
        with torch.no_grad():
            a = forward_il(il, x1, x2)
            b = forward_il(swapped, x2, x1)
        assert torch.equal(a[:, :64], b[:, 64:]) and torch.equal(a[:, 64:], b[:, :64])

    def test_il_width_mismatch(self):
        with pytest.raises(DimensionError):
            forward_il(self._il(), torch.rand(2, 32, dtype=te.DTYPE), torch.rand(2, 64, dtype=te.DTYPE))


class TestEvalMode:

    def test_repeated_eval_forwards_are_identical(self, micro_shape):
        net = init_params(XModalNet(micro_shape), te.RngState(0))
        x_o, x_t, x_u = _batch(micro_shape)
        with torch.no_grad():
            a = forward_full(net, x_o, x_t, x_u, mode='eval')
            b = forward_full(net, x_o, x_t, x_u, mode='eval')
        for stream in ('o', 't', 'u'):
            assert torch.equal(a['pred'][stream], b['pred'][stream])

    def test_reconstructions_in_unit_interval(self, micro_net, micro_shape):
        out = forward_full(micro_net, *_batch(micro_shape))
        for rec in out['recon'].values():
            assert float(rec.min()) > 0.0 and float(rec.max()) < 1.0

    def test_modality1_prediction_sends_no_gradient_to_modality2(self, micro_net, micro_shape):
        out = forward_full(micro_net, *_batch(micro_shape)[:2])
        te.backward(out['pred']['o'].sum())
        for p in list(micro_net.extractor2.parameters()) + list(micro_net.sa2.parameters()):
            assert p.grad is None or float(p.grad.abs().sum()) == 0.0

    def test_identical_rows_identical_predictions(self, micro_net, micro_shape):
        x_o = _batch(micro_shape, n=1)[0].repeat(3, 1, 1, 1)
        pred = forward_inference(micro_net, x_o)
        assert torch.allclose(pred, pred[:1].expand_as(pred), atol=1e-14)
        assert ((pred.argmax(dim=1) >= 0) & (pred.argmax(dim=1) < micro_shape.num_classes)).all()


class TestInitialLoss:

    def test_cross_entropy_near_log_classes(self):
        config = tiny_config()
        shape = network.shape_from_cfg(config)
        C = shape.num_classes
        for seed in range(5):
            net = init_params(network.get_net(config), te.RngState(seed))
            g = torch.Generator().manual_seed(seed)
            x_o = torch.rand(64, shape.d1, shape.patch, shape.patch, generator=g, dtype=te.DTYPE)
            x_t = torch.rand(64, shape.d2, generator=g, dtype=te.DTYPE)
            y = torch.eye(C, dtype=te.DTYPE)[torch.randint(0, C, (64,), generator=g)]
            with torch.no_grad():
                out = forward_full(net, x_o, x_t, mode='eval')
            for stream in ('o', 't'):
                ce = float(te.cross_entropy(out['pred'][stream], y))
                assert abs(ce - math.log(C)) < 0.1 * math.log(C)
