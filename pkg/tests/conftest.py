import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def numeric_grad(f, x, step=1e-5):
    """Central finite differences of scalar ``f`` at tensor ``x`` (evaluated without the tape)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(f(x))
            flat[i] = orig - step
            lo = float(f(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return g


def analytic_grad(f, x):
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad.detach()


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


@pytest.fixture
def gradcheck():
    def check(f, x, tol=1e-4, step=1e-5):
        err = rel_error(analytic_grad(f, x), numeric_grad(f, x, step))
        assert err < tol, f"relative gradient error {err:.3e} >= {tol}"
        return err

    return check


class _Probe(torch.nn.Module):
    def __init__(self, model, fn):
        super().__init__()
        self.model = model
        self.fn = fn

    def forward(self):
        return self.fn(self.model)


def tiny_model(arch="conformer", seed=4):
    from maskctc.model import DecoderConfig, EncoderConfig, MaskCTCModel, ModelConfig, Vocabulary

    cfg = ModelConfig(
        input_dim=3,
        vocab=Vocabulary.of_size(4),
        encoder=EncoderConfig(architecture=arch, num_layers=2, attn_dim=8, num_heads=2, ffn_dim=12, conv_kernel=3, dropout=0.0),
        decoder=DecoderConfig(num_layers=2, num_heads=2, ffn_dim=12, dropout=0.0),
    )
    return MaskCTCModel(cfg, seed=seed)


def combined_loss_fn(arch="conformer"):
    """Full ctc + mlm + dlp objective of a 2-layer d=8 model on one fixed utterance."""
    from maskctc.ctc import ctc_loss
    from maskctc.masking import combined_loss, dlp_loss, insert_masks, merge_masks, mlm_loss
    from maskctc.masking import MaskedSequence

    m = tiny_model(arch)
    mask = m.vocab.mask_id
    x = torch.as_tensor(np.random.default_rng(5).normal(size=(10, 3)))
    y = [1, 2, 0]
    mlm = MaskedSequence([1, mask, mask], (1, 2), mask)
    dele = merge_masks(y, [1, 2], mask)
    ins = insert_masks(y, [1], mask)

    def objective(model):
        enc = model.encode(x)
        c = ctc_loss(model.ctc_head(enc), y)
        t = mlm_loss(model.decode_mlm(enc, mlm.tokens), mlm, y)
        d = dlp_loss(model.length_head(model.decoder_states(enc, dele.masked.tokens)), dele)
        d = d + dlp_loss(model.length_head(model.decoder_states(enc, ins.masked.tokens)), ins)
        return combined_loss(c, t, d)

    return m, objective


@pytest.fixture
def combined_loss_probe():
    def make(name, arch="conformer"):
        m, objective = combined_loss_fn(arch)
        probe = _Probe(m, objective)

        def f(w):
            return torch.func.functional_call(probe, {"model." + name: w}, ())

        return f, dict(m.named_parameters())[name].detach().clone()

    return make


_ACCEPTANCE = []


def record_acceptance(name, ok, detail=""):
    line = f"ACCEPT {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
