import numpy as np
import pytest
import torch

import loss
import optimizer
from config import get_cfg_defaults
from network import tensor_engine as te
from network.xmodalnet import XModalNet, forward_full
from utils.errors import ContractError, FormatError, NumericError


OPTIM = get_cfg_defaults().OPTIM


def _step(net, shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    x_o = torch.rand(4, shape.d1, shape.patch, shape.patch, generator=g, dtype=te.DTYPE)
    x_t = torch.rand(4, shape.d2, generator=g, dtype=te.DTYPE)
    y = torch.eye(shape.num_classes, dtype=te.DTYPE)[[0, 1, 1, 0]]
    out = forward_full(net, x_o, x_t)
    return loss.loss_labeled(out['pred']['o'], out['pred']['t'], y)


class TestPolyLR:

    def test_spot_values(self):
        assert optimizer.poly_lr(0, 100, OPTIM) == OPTIM.BASE_LR
        assert abs(optimizer.poly_lr(50, 100, OPTIM) - OPTIM.BASE_LR * 0.5 ** OPTIM.POWER) < 1e-18
        assert optimizer.poly_lr(100, 100, OPTIM) == 0.0

    def test_zero_iterations(self):
        assert optimizer.poly_lr(0, 0, OPTIM) == OPTIM.BASE_LR

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            optimizer.poly_lr(101, 100, OPTIM)
        with pytest.raises(ContractError):
            optimizer.poly_lr(-1, 100, OPTIM)

    def test_scheduler_follows_poly_lr(self):
        p = torch.zeros(1, dtype=te.DTYPE, requires_grad=True)
        opt, sched = optimizer.get_optimizer([p], OPTIM, 10)
        for it in range(1, 6):
            p.grad = torch.ones(1, dtype=te.DTYPE)
            opt.step()
            sched.step()
            assert abs(opt.param_groups[0]['lr'] - optimizer.poly_lr(it, 10, OPTIM)) < 1e-15


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        p = torch.tensor([1.0, -2.0, 0.5], dtype=te.DTYPE, requires_grad=True)
        opt, _ = optimizer.get_optimizer([p], OPTIM, 10)
        g = torch.tensor([100.0, -3.0, 0.25], dtype=te.DTYPE)
        p.grad = g.clone()
        before = p.detach().clone()
        optimizer.adam_step(opt)
        exact = -OPTIM.BASE_LR * g / (g.abs() + OPTIM.EPSILON)
        assert float((p.detach() - before - exact).abs().max()) < 1e-15
        assert float((p.detach() - before + OPTIM.BASE_LR * g.sign()).abs().max()) < 1e-10

    def test_zero_gradient_leaves_parameter(self):
        p = torch.tensor([1.0, 2.0], dtype=te.DTYPE, requires_grad=True)
        opt, _ = optimizer.get_optimizer([p], OPTIM, 10)
        p.grad = torch.zeros(2, dtype=te.DTYPE)
        optimizer.adam_step(opt)
        assert torch.equal(p.detach(), torch.tensor([1.0, 2.0], dtype=te.DTYPE))

    def test_quadratic_minimum_within_5000_steps(self):
        optim_cfg = get_cfg_defaults().OPTIM
        optim_cfg.BASE_LR = 0.01
        p = torch.tensor([3.5], dtype=te.DTYPE, requires_grad=True)
        opt, sched = optimizer.get_optimizer([p], optim_cfg, 5000)
        for _ in range(5000):
            opt.zero_grad()
            ((p - 3.0) ** 2).sum().backward()
            optimizer.adam_step(opt)
            sched.step()
        assert abs(float(p.detach()[0]) - 3.0) < 1e-6

    def test_non_finite_gradient_named(self, micro_net, micro_shape):
        opt, _ = optimizer.get_optimizer(micro_net.generator_parameters(), OPTIM, 10)
        te.backward(_step(micro_net, micro_shape))
        micro_net.tail_o.cls.weight.grad[0, 0] = float('nan')
        before = micro_net.tail_o.cls.weight.detach().clone()
        with pytest.raises(NumericError, match='tail_o.cls.weight'):
            optimizer.adam_step(opt, optimizer.param_names(micro_net))
        assert torch.equal(micro_net.tail_o.cls.weight.detach(), before)


class TestCheckpoint:

    def _trained(self, micro_shape, micro_net):
        opt, sched = optimizer.get_optimizer(micro_net.generator_parameters(), OPTIM, 10)
        for seed in range(2):
            opt.zero_grad()
            te.backward(_step(micro_net, micro_shape, seed))
            optimizer.adam_step(opt)
            sched.step()
        return opt

    def test_round_trip(self, micro_shape, micro_net, tmp_path):
        opt = self._trained(micro_shape, micro_net)
        path = str(tmp_path / 'a.xmck')
        optimizer.save_checkpoint(path, micro_net, {'gen': opt}, 2, extra={'progress': np.array([1.0, 0.0])})

        fresh = XModalNet(micro_shape, micro_net.settings)
        fresh_opt, fresh_sched = optimizer.get_optimizer(fresh.generator_parameters(), OPTIM, 10)
        entries = optimizer.load_checkpoint(path)
        it = optimizer.restore_snapshot(entries, fresh, {'gen': fresh_opt}, {'gen': fresh_sched}, 10, OPTIM)
        assert it == 2
        assert fresh.initialized
        assert all(torch.equal(a, b) for a, b in zip(fresh.state_dict().values(), micro_net.state_dict().values()))
        assert fresh_opt.param_groups[0]['lr'] == optimizer.poly_lr(2, 10, OPTIM)
        assert np.array_equal(entries['progress'], [1.0, 0.0])

        resaved = str(tmp_path / 'b.xmck')
        optimizer.save_checkpoint(resaved, fresh, {'gen': fresh_opt}, it, extra={'progress': entries['progress']})
        with open(path, 'rb') as a, open(resaved, 'rb') as b:
            assert a.read() == b.read()

    def test_shape_mismatch(self, micro_shape, micro_net):
        entries = optimizer.checkpoint_entries(micro_net, {}, 0)
        other = XModalNet(micro_shape._replace(num_classes=3))
        with pytest.raises(FormatError, match='shape'):
            optimizer.load_weights(entries, other)

    def test_missing_entry(self, micro_net):
        entries = optimizer.checkpoint_entries(micro_net, {}, 0)
        del entries['net/tail_o.cls.weight']
        with pytest.raises(FormatError, match='tail_o.cls.weight'):
            optimizer.load_weights(entries, micro_net)

    def test_in_memory_entries(self, micro_shape, micro_net):
        entries = optimizer.checkpoint_entries(micro_net, {}, 0)
        fresh = optimizer.load_weights(entries, XModalNet(micro_shape, micro_net.settings))
        assert all(torch.equal(a, b) for a, b in zip(fresh.state_dict().values(), micro_net.state_dict().values()))
