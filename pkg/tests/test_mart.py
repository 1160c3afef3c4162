import pytest
import torch

from storyviz.config import MartConfig
from storyviz.mart import MartEncoder, MemoryState, MemoryUpdater, attention_pool, masked_softmax


@pytest.fixture
def mart_cfg():
    return MartConfig(hidden_size=16, num_layers=2, num_heads=2, num_memory_cells=3, dropout=0.0, max_seq_len=6)


def test_masked_softmax_zeroes_masked_entries():
    logits = torch.tensor([[1.0, 2.0, 3.0]])
    mask = torch.tensor([[True, False, True]])
    probs = masked_softmax(logits, mask)
    assert float(probs[0, 1]) == 0.0
    assert float(probs.sum()) == pytest.approx(1.0)


def test_attention_pool_weights():
    enc = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]])
    mask = torch.tensor([[True, True, False]])
    pooled, alpha = attention_pool(enc, mask, torch.tensor([1.0, 0.0]))
    e = torch.exp(torch.tensor(1.0))
    assert torch.allclose(alpha[0], torch.tensor([e / (e + 1), 1 / (e + 1), 0.0]))
    assert torch.allclose(pooled[0], torch.tensor([e / (e + 1), 1 / (e + 1)]))


def test_memory_updater_gate_interpolates():
    torch.manual_seed(0)
    updater = MemoryUpdater(4)
    memory = torch.randn(2, 3, 4)
    summary = torch.randn(2, 4)
    with torch.no_grad():
        updater.gate.weight.zero_()
        updater.gate.bias.fill_(-50.0)
    # closed gate keeps the old memory
    assert torch.allclose(updater(memory, summary), memory, atol=1e-6)
    with torch.no_grad():
        updater.gate.bias.fill_(50.0)
    joint = torch.cat([memory, summary.unsqueeze(1).expand_as(memory)], dim=-1)
    assert torch.allclose(updater(memory, summary), torch.tanh(updater.candidate(joint)), atol=1e-6)


def test_step_shapes_and_memory_threading(mart_cfg):
    torch.manual_seed(0)
    mart = MartEncoder(mart_cfg, input_dim=5, cond_dim=7)
    memory = mart.init_memory(torch.randn(2, 7))
    assert len(memory.cells) == 2
    assert memory.cells[0].shape == (2, 3, 16)
    x = torch.randn(2, 4, 5)
    mask = torch.ones(2, 4, dtype=torch.bool)
    hidden, new_memory = mart.step(x, mask, memory)
    assert hidden.shape == (2, 4, 16)
    assert not torch.allclose(new_memory.cells[0], memory.cells[0])
    again, _ = mart.step(x, mask, new_memory)
    assert not torch.allclose(again, hidden)


def test_padding_does_not_leak(mart_cfg):
    torch.manual_seed(0)
    mart = MartEncoder(mart_cfg, input_dim=5).eval()
    memory = mart.constant_memory(1)
    x = torch.randn(1, 4, 5)
    mask = torch.tensor([[True, True, False, False]])
    noisy = x.clone()
    noisy[:, 2:] = 100.0
    h1, m1 = mart.step(x, mask, memory)
    h2, m2 = mart.step(noisy, mask, memory)
    assert torch.allclose(h1[:, :2], h2[:, :2], atol=1e-5)
    assert torch.allclose(m1.cells[-1], m2.cells[-1], atol=1e-5)


def test_attn_mask_enforces_causality(mart_cfg):
    torch.manual_seed(0)
    mart = MartEncoder(mart_cfg, input_dim=5).eval()
    memory = mart.constant_memory(1)
    causal = torch.tril(torch.ones(4, 4, dtype=torch.bool)).unsqueeze(0)
    mask = torch.ones(1, 4, dtype=torch.bool)
    x = torch.randn(1, 4, 5)
    changed = x.clone()
    changed[:, 3] += 1.0
    h1, _ = mart.step(x, mask, memory, attn_mask=causal)
    h2, _ = mart.step(changed, mask, memory, attn_mask=causal)
    assert torch.allclose(h1[:, :3], h2[:, :3], atol=1e-6)
    assert not torch.allclose(h1[:, 3], h2[:, 3])


def test_step_rejects_fully_masked_rows(mart_cfg):
    mart = MartEncoder(mart_cfg, input_dim=5)
    with pytest.raises(ValueError):
        mart.step(torch.randn(1, 3, 5), torch.zeros(1, 3, dtype=torch.bool), mart.constant_memory(1))


def test_memory_state_round_trip():
    state = MemoryState((torch.randn(1, 2, 4), torch.randn(1, 2, 4)))
    back = MemoryState.from_dict(state.to_dict())
    assert all(torch.equal(a, b) for a, b in zip(state.cells, back.cells))


def test_memory_is_the_only_state_carried_between_steps(mart_cfg):
    torch.manual_seed(0)
    mart = MartEncoder(mart_cfg, input_dim=5, cond_dim=7).eval()
    inputs = [torch.randn(2, 4, 5) for _ in range(4)]
    mask = torch.ones(2, 4, dtype=torch.bool)
    memory = mart.init_memory(torch.randn(2, 7))
    straight = []
    for k, x in enumerate(inputs):
        hidden, memory = mart.step(x, mask, memory)
        straight.append(hidden)
        if k == 1:
            saved = memory.to_dict()
    # a fresh encoder with the same weights resumes from the saved memory alone
    resumed = MartEncoder(mart_cfg, input_dim=5, cond_dim=7).eval()
    resumed.load_state_dict(mart.state_dict())
    memory = MemoryState.from_dict(saved)
    for k in (2, 3):
        hidden, memory = resumed.step(inputs[k], mask, memory)
        assert torch.allclose(hidden, straight[k], atol=1e-6)


def test_gradient_flows_back_through_memory(mart_cfg):
    torch.manual_seed(0)
    mart = MartEncoder(mart_cfg, input_dim=5)
    first = torch.randn(1, 4, 5, requires_grad=True)
    mask = torch.ones(1, 4, dtype=torch.bool)
    _, memory = mart.step(first, mask, mart.constant_memory(1))
    _, memory = mart.step(torch.randn(1, 4, 5), mask, memory)
    hidden, _ = mart.step(torch.randn(1, 4, 5), mask, memory)
    (grad,) = torch.autograd.grad(hidden.sum(), first)
    assert float(grad.abs().sum()) > 0


def test_encoder_registers_exactly_one_memory_source(mart_cfg):
    projected = MartEncoder(mart_cfg, input_dim=5, cond_dim=7)
    names = {name for name, _ in projected.named_parameters()}
    assert "memory_constant" not in names
    assert any(name.startswith("memory_init.") for name in names)
    with pytest.raises(ValueError):
        projected.constant_memory(1)

    constant = MartEncoder(mart_cfg, input_dim=5)
    names = {name for name, _ in constant.named_parameters()}
    assert "memory_constant" in names
    assert not any(name.startswith("memory_init") for name in names)
    with pytest.raises(ValueError):
        constant.init_memory(torch.randn(1, 7))
